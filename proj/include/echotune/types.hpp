#pragma once

#include <string>
#include <utility>
#include <vector>

namespace echotune {

// Attention projection a module attaches to.
enum class Proj { q = 0, k = 1, v = 2, o = 3 };

enum class AdapterKind { lora, dora };

// (layer index, projection) key; layer indices are resolved (non-negative).
using ModuleKey = std::pair<int, Proj>;

std::string proj_name(Proj p);
Proj proj_from_name(const std::string& name); // ConfigError on unknown name

std::string adapter_kind_name(AdapterKind k);
AdapterKind adapter_kind_from_name(const std::string& name);

std::string proj_list_str(const std::vector<Proj>& ps);

} // namespace echotune
