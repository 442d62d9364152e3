#include "echotune/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "echotune/checkpoint.hpp"
#include "echotune/error.hpp"

namespace echotune {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

struct ParseContext {
    std::string origin;
    int line = 0;

    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError(origin + ":" + std::to_string(line) + ": " + msg);
    }
    int to_int(const std::string& v) const {
        try {
            size_t used = 0;
            int r = std::stoi(v, &used);
            if (used != v.size()) fail("trailing characters in integer '" + v + "'");
            return r;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            fail("expected integer, got '" + v + "'");
        }
    }
    uint64_t to_u64(const std::string& v) const {
        try {
            size_t used = 0;
            unsigned long long r = std::stoull(v, &used);
            if (used != v.size()) fail("trailing characters in integer '" + v + "'");
            return r;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            fail("expected unsigned integer, got '" + v + "'");
        }
    }
    double to_double(const std::string& v) const {
        try {
            size_t used = 0;
            double r = std::stod(v, &used);
            if (used != v.size()) fail("trailing characters in number '" + v + "'");
            return r;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            fail("expected number, got '" + v + "'");
        }
    }
    bool to_bool(const std::string& v) const {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        fail("expected boolean (true/false), got '" + v + "'");
    }
    std::vector<int> to_int_list(const std::string& v) const {
        std::vector<int> out;
        for (const auto& part : split(v, ',')) {
            if (part.empty()) fail("empty entry in integer list '" + v + "'");
            out.push_back(to_int(part));
        }
        return out;
    }
    std::vector<Proj> to_proj_list(const std::string& v) const {
        std::vector<Proj> out;
        for (const auto& part : split(v, ',')) {
            try {
                out.push_back(proj_from_name(part));
            } catch (const ConfigError& e) {
                fail(e.what());
            }
        }
        return out;
    }
    std::vector<TaskKind> to_task_list(const std::string& v) const {
        std::vector<TaskKind> out;
        for (const auto& part : split(v, ',')) {
            try {
                out.push_back(task_from_name(part));
            } catch (const ConfigError& e) {
                fail(e.what());
            }
        }
        return out;
    }
};

std::string fmt_num(double v) {
    std::ostringstream oss;
    oss.precision(17);
    oss << v;
    return oss.str();
}

std::string int_list_str(const std::vector<int>& xs) {
    std::string s;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(xs[i]);
    }
    return s;
}

std::string task_list_str(const std::vector<TaskKind>& ts) {
    std::string s;
    for (size_t i = 0; i < ts.size(); ++i) {
        if (i) s += ",";
        s += task_name(ts[i]);
    }
    return s;
}

} // namespace

void RunConfig::validate() const {
    backbone.validate();
    if (adapter_rank < 1) throw ConfigError("adapter.rank must be >= 1");
    if (adapter_dropout < 0.0 || adapter_dropout >= 1.0) {
        throw ConfigError("adapter.dropout must lie in [0, 1)");
    }
    if (adapter_targets.empty()) throw ConfigError("adapter.targets is empty");
    echo.validate(backbone.n_layers);
    if (!(0.0 <= p_end && p_end <= p_start && p_start <= 1.0)) {
        throw ConfigError("routing must satisfy 0 <= p_end <= p_start <= 1");
    }
    objective.validate();
    data.validate(backbone.vocab_size);
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    const int longest = std::max(data.prompt_len, data.modsum_prompt_len);
    if (longest * 2 + 1 > backbone.max_seq_len) {
        throw ConfigError("prompt lengths do not fit max_seq_len " +
                          std::to_string(backbone.max_seq_len));
    }
}

std::string RunConfig::canonical_text() const {
    std::ostringstream o;
    o << "backbone.n_layers = " << backbone.n_layers << "\n";
    o << "backbone.d_model = " << backbone.d_model << "\n";
    o << "backbone.n_heads = " << backbone.n_heads << "\n";
    o << "backbone.d_ff = " << backbone.d_ff << "\n";
    o << "backbone.vocab_size = " << backbone.vocab_size << "\n";
    o << "backbone.max_seq_len = " << backbone.max_seq_len << "\n";
    o << "adapter.kind = " << adapter_kind_name(adapter_kind) << "\n";
    o << "adapter.targets = " << proj_list_str(adapter_targets) << "\n";
    o << "adapter.rank = " << adapter_rank << "\n";
    o << "adapter.alpha = " << fmt_num(adapter_alpha) << "\n";
    o << "adapter.dropout = " << fmt_num(adapter_dropout) << "\n";
    o << "echo.enabled = " << (echo.enabled ? "true" : "false") << "\n";
    o << "echo.source_layers = " << int_list_str(echo.source_layers) << "\n";
    o << "echo.target_layers = " << int_list_str(echo.target_layers) << "\n";
    o << "echo.target_projections = " << proj_list_str(echo.target_projections) << "\n";
    o << "echo.bottleneck_dim = " << echo.bottleneck_dim << "\n";
    o << "echo.gate_bias_init = " << fmt_num(echo.gate_bias_init) << "\n";
    o << "echo.lambda_init = " << fmt_num(echo.lambda_init) << "\n";
    o << "echo.answer_mask = " << (echo.answer_only_mask ? "true" : "false") << "\n";
    o << "routing.p_start = " << fmt_num(p_start) << "\n";
    o << "routing.p_end = " << fmt_num(p_end) << "\n";
    o << "objective.lambda_kd = " << fmt_num(objective.lambda_kd) << "\n";
    o << "objective.tau = " << fmt_num(objective.tau) << "\n";
    o << "objective.lr = " << fmt_num(objective.lr) << "\n";
    o << "objective.beta1 = " << fmt_num(objective.beta1) << "\n";
    o << "objective.beta2 = " << fmt_num(objective.beta2) << "\n";
    o << "objective.eps = " << fmt_num(objective.eps) << "\n";
    o << "objective.weight_decay = " << fmt_num(objective.weight_decay) << "\n";
    o << "data.tasks = " << task_list_str(data.tasks) << "\n";
    o << "data.train_per_task = " << data.train_per_task << "\n";
    o << "data.eval_per_task = " << data.eval_per_task << "\n";
    o << "data.payload_vocab = " << data.payload_vocab << "\n";
    o << "data.prompt_len = " << data.prompt_len << "\n";
    o << "data.modsum_prompt_len = " << data.modsum_prompt_len << "\n";
    o << "data.file = " << data_file << "\n";
    o << "data.dump_datasets = " << (dump_datasets ? "true" : "false") << "\n";
    o << "train.epochs = " << epochs << "\n";
    o << "train.batch_size = " << batch_size << "\n";
    o << "seeds.init = " << seed_init << "\n";
    o << "seeds.data = " << seed_data << "\n";
    o << "seeds.routing = " << seed_routing << "\n";
    o << "seeds.dropout = " << seed_dropout << "\n";
    o << "out.dir = " << out_dir << "\n";
    return o.str();
}

uint64_t RunConfig::config_hash() const {
    const std::string text = canonical_text();
    return fnv1a64_bytes(reinterpret_cast<const uint8_t*>(text.data()), text.size());
}

void RunConfig::apply_seed(uint64_t seed) {
    seed_init = seed;
    seed_data = seed + 1;
    seed_routing = seed + 2;
    seed_dropout = seed + 3;
}

RunConfig RunConfig::from_string(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    ParseContext ctx{origin, 0};

    const std::map<std::string, std::function<void(const std::string&)>> setters = {
        {"backbone.n_layers", [&](const std::string& v) { cfg.backbone.n_layers = ctx.to_int(v); }},
        {"backbone.d_model", [&](const std::string& v) { cfg.backbone.d_model = ctx.to_int(v); }},
        {"backbone.n_heads", [&](const std::string& v) { cfg.backbone.n_heads = ctx.to_int(v); }},
        {"backbone.d_ff", [&](const std::string& v) { cfg.backbone.d_ff = ctx.to_int(v); }},
        {"backbone.vocab_size", [&](const std::string& v) { cfg.backbone.vocab_size = ctx.to_int(v); }},
        {"backbone.max_seq_len", [&](const std::string& v) { cfg.backbone.max_seq_len = ctx.to_int(v); }},
        {"adapter.kind", [&](const std::string& v) { cfg.adapter_kind = adapter_kind_from_name(v); }},
        {"adapter.targets", [&](const std::string& v) { cfg.adapter_targets = ctx.to_proj_list(v); }},
        {"adapter.rank", [&](const std::string& v) { cfg.adapter_rank = ctx.to_int(v); }},
        {"adapter.alpha", [&](const std::string& v) { cfg.adapter_alpha = ctx.to_double(v); }},
        {"adapter.dropout", [&](const std::string& v) { cfg.adapter_dropout = ctx.to_double(v); }},
        {"echo.enabled", [&](const std::string& v) { cfg.echo.enabled = ctx.to_bool(v); }},
        {"echo.source_layers", [&](const std::string& v) { cfg.echo.source_layers = ctx.to_int_list(v); }},
        {"echo.target_layers", [&](const std::string& v) { cfg.echo.target_layers = ctx.to_int_list(v); }},
        {"echo.target_projections",
         [&](const std::string& v) { cfg.echo.target_projections = ctx.to_proj_list(v); }},
        {"echo.bottleneck_dim", [&](const std::string& v) { cfg.echo.bottleneck_dim = ctx.to_int(v); }},
        {"echo.gate_bias_init", [&](const std::string& v) { cfg.echo.gate_bias_init = ctx.to_double(v); }},
        {"echo.lambda_init", [&](const std::string& v) { cfg.echo.lambda_init = ctx.to_double(v); }},
        {"echo.answer_mask", [&](const std::string& v) { cfg.echo.answer_only_mask = ctx.to_bool(v); }},
        {"routing.p_start", [&](const std::string& v) { cfg.p_start = ctx.to_double(v); }},
        {"routing.p_end", [&](const std::string& v) { cfg.p_end = ctx.to_double(v); }},
        {"objective.lambda_kd", [&](const std::string& v) { cfg.objective.lambda_kd = ctx.to_double(v); }},
        {"objective.tau", [&](const std::string& v) { cfg.objective.tau = ctx.to_double(v); }},
        {"objective.lr", [&](const std::string& v) { cfg.objective.lr = ctx.to_double(v); }},
        {"objective.beta1", [&](const std::string& v) { cfg.objective.beta1 = ctx.to_double(v); }},
        {"objective.beta2", [&](const std::string& v) { cfg.objective.beta2 = ctx.to_double(v); }},
        {"objective.eps", [&](const std::string& v) { cfg.objective.eps = ctx.to_double(v); }},
        {"objective.weight_decay",
         [&](const std::string& v) { cfg.objective.weight_decay = ctx.to_double(v); }},
        {"data.tasks", [&](const std::string& v) { cfg.data.tasks = ctx.to_task_list(v); }},
        {"data.train_per_task", [&](const std::string& v) { cfg.data.train_per_task = ctx.to_int(v); }},
        {"data.eval_per_task", [&](const std::string& v) { cfg.data.eval_per_task = ctx.to_int(v); }},
        {"data.payload_vocab", [&](const std::string& v) { cfg.data.payload_vocab = ctx.to_int(v); }},
        {"data.prompt_len", [&](const std::string& v) { cfg.data.prompt_len = ctx.to_int(v); }},
        {"data.modsum_prompt_len",
         [&](const std::string& v) { cfg.data.modsum_prompt_len = ctx.to_int(v); }},
        {"data.file", [&](const std::string& v) { cfg.data_file = v; }},
        {"data.dump_datasets", [&](const std::string& v) { cfg.dump_datasets = ctx.to_bool(v); }},
        {"train.epochs", [&](const std::string& v) { cfg.epochs = ctx.to_int(v); }},
        {"train.batch_size", [&](const std::string& v) { cfg.batch_size = ctx.to_int(v); }},
        {"seeds.init", [&](const std::string& v) { cfg.seed_init = ctx.to_u64(v); }},
        {"seeds.data", [&](const std::string& v) { cfg.seed_data = ctx.to_u64(v); }},
        {"seeds.routing", [&](const std::string& v) { cfg.seed_routing = ctx.to_u64(v); }},
        {"seeds.dropout", [&](const std::string& v) { cfg.seed_dropout = ctx.to_u64(v); }},
        {"out.dir", [&](const std::string& v) { cfg.out_dir = v; }},
    };

    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        ++ctx.line;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) ctx.fail("expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end()) ctx.fail("unknown key '" + key + "'");
        it->second(value);
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path.string() + "'");
    std::stringstream buf;
    buf << f.rdbuf();
    return from_string(buf.str(), path.string());
}

} // namespace echotune
