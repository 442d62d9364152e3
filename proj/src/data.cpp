#include "echotune/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "echotune/error.hpp"

namespace echotune {

std::string task_name(TaskKind t) {
    switch (t) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::sorted: return "sorted";
    case TaskKind::modsum: return "modsum";
    }
    throw UsageError("bad task enum");
}

TaskKind task_from_name(const std::string& name) {
    if (name == "copy") return TaskKind::copy;
    if (name == "reverse") return TaskKind::reverse;
    if (name == "sorted") return TaskKind::sorted;
    if (name == "modsum") return TaskKind::modsum;
    throw ConfigError("unknown task '" + name + "' (expected copy, reverse, sorted or modsum)");
}

namespace {
constexpr int kTaskKinds = 4;
}

void DataSpec::validate(int vocab_size) const {
    if (tasks.empty()) throw ConfigError("data task list is empty");
    if (payload_vocab < 2) throw ConfigError("payload_vocab must be >= 2");
    if (payload_vocab > vocab_size - 2 - kTaskKinds) {
        throw ConfigError("payload_vocab " + std::to_string(payload_vocab) +
                          " collides with reserved SEP/PAD/task-marker ids (vocab " +
                          std::to_string(vocab_size) + ")");
    }
    if (prompt_len < 1 || modsum_prompt_len < 1) throw ConfigError("prompt lengths must be >= 1");
    if (train_per_task < 1 || eval_per_task < 1) throw ConfigError("dataset sizes must be >= 1");
}

int sep_token(int vocab_size) { return vocab_size - 1; }
int pad_token(int vocab_size) { return vocab_size - 2; }

int task_marker_token(TaskKind task, int vocab_size) {
    return vocab_size - 3 - static_cast<int>(task);
}

std::vector<int> task_answer(TaskKind task, std::span<const int> prompt, int modulus) {
    std::vector<int> answer(prompt.begin(), prompt.end());
    switch (task) {
    case TaskKind::copy:
        return answer;
    case TaskKind::reverse:
        std::reverse(answer.begin(), answer.end());
        return answer;
    case TaskKind::sorted:
        std::sort(answer.begin(), answer.end());
        return answer;
    case TaskKind::modsum: {
        long long s = 0;
        for (int p : prompt) s += p;
        return {static_cast<int>(s % modulus)};
    }
    }
    throw UsageError("bad task enum");
}

std::vector<Sample> gen_dataset(TaskKind task, int n, const DataSpec& spec, uint64_t seed,
                                int vocab_size) {
    if (n < 1) throw ConfigError("gen_dataset: n must be >= 1");
    spec.validate(vocab_size);
    const int len = task == TaskKind::modsum ? spec.modsum_prompt_len : spec.prompt_len;
    DetRng rng(derive_seed(seed, "data." + task_name(task)));
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.task = task;
        std::vector<int> payload(static_cast<size_t>(len));
        for (auto& tok : payload) tok = rng.uniform_int(0, spec.payload_vocab);
        s.prompt.reserve(payload.size() + 1);
        s.prompt.push_back(task_marker_token(task, vocab_size));
        s.prompt.insert(s.prompt.end(), payload.begin(), payload.end());
        s.answer = task_answer(task, payload, spec.payload_vocab);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Sample> gen_mixture(const DataSpec& spec, int per_task, uint64_t seed, int vocab_size) {
    std::vector<std::vector<Sample>> per;
    per.reserve(spec.tasks.size());
    for (TaskKind t : spec.tasks) per.push_back(gen_dataset(t, per_task, spec, seed, vocab_size));
    std::vector<Sample> mixed;
    mixed.reserve(per.size() * static_cast<size_t>(per_task));
    for (int i = 0; i < per_task; ++i) {
        for (auto& bucket : per) mixed.push_back(std::move(bucket[static_cast<size_t>(i)]));
    }
    return mixed;
}

EncodedRow encode(const Sample& s, int max_seq_len, int vocab_size) {
    if (s.prompt.empty() || s.answer.empty()) throw DataError("encode: empty prompt or answer");
    const int total = static_cast<int>(s.prompt.size()) + 1 + static_cast<int>(s.answer.size());
    if (total > max_seq_len) {
        throw DataError("encode: sample of " + std::to_string(total) + " tokens exceeds max_seq_len " +
                        std::to_string(max_seq_len));
    }
    const int sep = sep_token(vocab_size);
    for (int tok : s.prompt) {
        if (tok < 0 || tok >= pad_token(vocab_size)) {
            throw DataError("encode: prompt token " + std::to_string(tok) + " collides with reserved ids");
        }
    }
    for (int tok : s.answer) {
        if (tok < 0 || tok >= pad_token(vocab_size)) {
            throw DataError("encode: answer token " + std::to_string(tok) + " collides with reserved ids");
        }
    }
    EncodedRow row;
    row.task = s.task;
    row.tokens = s.prompt;
    row.tokens.push_back(sep);
    row.t_star = static_cast<int>(s.prompt.size());
    row.labels.assign(row.tokens.size(), kIgnoreLabel);
    for (int tok : s.answer) {
        row.tokens.push_back(tok);
        row.labels.push_back(tok);
    }
    return row;
}

Sample decode(const EncodedRow& row, int vocab_size) {
    const int sep = sep_token(vocab_size);
    auto it = std::find(row.tokens.begin(), row.tokens.end(), sep);
    if (it == row.tokens.end()) throw DataError("decode: no separator token in row");
    Sample s;
    s.task = row.task;
    s.prompt.assign(row.tokens.begin(), it);
    s.answer.assign(it + 1, row.tokens.end());
    return s;
}

std::span<const int> Batch::row_tokens(int b) const {
    return std::span<const int>(tokens).subspan(static_cast<size_t>(b) * cols,
                                                static_cast<size_t>(length[static_cast<size_t>(b)]));
}

std::span<const int> Batch::row_labels(int b) const {
    return std::span<const int>(labels).subspan(static_cast<size_t>(b) * cols,
                                                static_cast<size_t>(length[static_cast<size_t>(b)]));
}

std::span<const uint8_t> Batch::row_mask(int b) const {
    return std::span<const uint8_t>(answer_mask)
        .subspan(static_cast<size_t>(b) * cols, static_cast<size_t>(length[static_cast<size_t>(b)]));
}

Batch make_batch(std::span<const EncodedRow> rows, int vocab_size) {
    if (rows.empty()) throw DataError("make_batch: empty row set");
    Batch batch;
    batch.rows = static_cast<int>(rows.size());
    int cols = 0;
    for (const auto& r : rows) cols = std::max(cols, static_cast<int>(r.tokens.size()));
    batch.cols = cols;
    const int pad = pad_token(vocab_size);
    batch.tokens.assign(static_cast<size_t>(batch.rows) * cols, pad);
    batch.labels.assign(static_cast<size_t>(batch.rows) * cols, kIgnoreLabel);
    batch.answer_mask.assign(static_cast<size_t>(batch.rows) * cols, 0);
    for (int b = 0; b < batch.rows; ++b) {
        const EncodedRow& r = rows[static_cast<size_t>(b)];
        batch.length.push_back(static_cast<int>(r.tokens.size()));
        batch.t_star.push_back(r.t_star);
        batch.task.push_back(r.task);
        for (size_t i = 0; i < r.tokens.size(); ++i) {
            batch.tokens[static_cast<size_t>(b) * cols + i] = r.tokens[i];
            batch.labels[static_cast<size_t>(b) * cols + i] = r.labels[i];
            batch.answer_mask[static_cast<size_t>(b) * cols + i] = r.labels[i] != kIgnoreLabel ? 1 : 0;
        }
    }
    return batch;
}

void dump_dataset(std::span<const Sample> samples, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    for (const auto& s : samples) {
        f << task_name(s.task) << "|";
        for (size_t i = 0; i < s.prompt.size(); ++i) f << (i ? " " : "") << s.prompt[i];
        f << "|";
        for (size_t i = 0; i < s.answer.size(); ++i) f << (i ? " " : "") << s.answer[i];
        f << "\n";
    }
}

std::vector<Sample> load_dataset(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open dataset '" + path.string() + "'");
    std::vector<Sample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        const size_t bar1 = line.find('|');
        const size_t bar2 = line.find('|', bar1 == std::string::npos ? 0 : bar1 + 1);
        if (bar1 == std::string::npos || bar2 == std::string::npos) {
            throw DataError("dataset line " + std::to_string(line_no) + ": expected task|prompt|answer");
        }
        Sample s;
        s.task = task_from_name(line.substr(0, bar1));
        auto parse_ids = [&](const std::string& text) {
            std::vector<int> ids;
            std::istringstream iss(text);
            int v;
            while (iss >> v) ids.push_back(v);
            return ids;
        };
        s.prompt = parse_ids(line.substr(bar1 + 1, bar2 - bar1 - 1));
        s.answer = parse_ids(line.substr(bar2 + 1));
        if (s.prompt.empty() || s.answer.empty()) {
            throw DataError("dataset line " + std::to_string(line_no) + ": empty prompt or answer");
        }
        out.push_back(std::move(s));
    }
    return out;
}

EvalResult eval_with_decoder(std::span<const Sample> samples, const DecodeFn& decoder) {
    EvalResult r;
    for (const auto& s : samples) {
        ++r.total;
        if (decoder(s) == s.answer) ++r.correct;
    }
    return r;
}

EvalResult eval_accuracy(const FrozenWeights& w, const AdapterSet& adapters,
                         std::span<const Sample> samples) {
    ForwardOptions opts;
    opts.training = false;
    opts.want_trace = false;
    const int vocab = w.config.vocab_size;
    return eval_with_decoder(samples, [&](const Sample& s) {
        std::vector<int> context = s.prompt;
        context.push_back(sep_token(vocab));
        std::vector<int> decoded;
        for (size_t step = 0; step < s.answer.size(); ++step) {
            ForwardResult fr = forward(w, adapters, context, nullptr, opts);
            const int last = fr.logits.dim(0) - 1;
            int best = 0;
            double best_v = fr.logits.at(last, 0);
            for (int j = 1; j < vocab; ++j) {
                const double v = fr.logits.at(last, j);
                if (v > best_v) {
                    best_v = v;
                    best = j;
                }
            }
            decoded.push_back(best);
            context.push_back(best);
        }
        return decoded;
    });
}

} // namespace echotune
