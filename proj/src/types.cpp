#include "echotune/types.hpp"

#include "echotune/error.hpp"

namespace echotune {

std::string proj_name(Proj p) {
    switch (p) {
    case Proj::q: return "q";
    case Proj::k: return "k";
    case Proj::v: return "v";
    case Proj::o: return "o";
    }
    throw UsageError("bad projection enum");
}

Proj proj_from_name(const std::string& name) {
    if (name == "q") return Proj::q;
    if (name == "k") return Proj::k;
    if (name == "v") return Proj::v;
    if (name == "o") return Proj::o;
    throw ConfigError("unknown projection '" + name + "' (expected q, k, v or o)");
}

std::string adapter_kind_name(AdapterKind k) {
    return k == AdapterKind::lora ? "lora" : "dora";
}

AdapterKind adapter_kind_from_name(const std::string& name) {
    if (name == "lora") return AdapterKind::lora;
    if (name == "dora") return AdapterKind::dora;
    throw ConfigError("unknown adapter kind '" + name + "' (expected lora or dora)");
}

std::string proj_list_str(const std::vector<Proj>& ps) {
    std::string s;
    for (size_t i = 0; i < ps.size(); ++i) {
        if (i) s += ",";
        s += proj_name(ps[i]);
    }
    return s;
}

} // namespace echotune
