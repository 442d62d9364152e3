#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "echotune/adapters.hpp"
#include "echotune/backbone.hpp"

namespace echotune {

// Toy instruction-style tasks whose answer is a pure function of the prompt,
// so exact-match accuracy is exactly measurable.
enum class TaskKind { copy, reverse, sorted, modsum };

std::string task_name(TaskKind t);
TaskKind task_from_name(const std::string& name);

struct DataSpec {
    std::vector<TaskKind> tasks{TaskKind::copy, TaskKind::reverse, TaskKind::sorted, TaskKind::modsum};
    int train_per_task = 768;
    int eval_per_task = 64;
    int payload_vocab = 16; // payload token ids live in [0, payload_vocab)
    int prompt_len = 4;     // copy / reverse / sorted
    int modsum_prompt_len = 2;

    void validate(int vocab_size) const;
};

struct Sample {
    std::vector<int> prompt;
    std::vector<int> answer;
    TaskKind task = TaskKind::copy;

    bool operator==(const Sample&) const = default;
};

// Reserved ids at the top of the vocabulary.
int sep_token(int vocab_size);
int pad_token(int vocab_size);
// Task-marker token generated as the first prompt position, so mixed-task
// batches stay well-posed (the answer is a function of the prompt alone).
int task_marker_token(TaskKind task, int vocab_size);

// The deterministic answer function; `modulus` is used by modsum only.
std::vector<int> task_answer(TaskKind task, std::span<const int> prompt, int modulus);

std::vector<Sample> gen_dataset(TaskKind task, int n, const DataSpec& spec, uint64_t seed,
                                int vocab_size);
// Round-robin interleaving of the configured tasks.
std::vector<Sample> gen_mixture(const DataSpec& spec, int per_task, uint64_t seed, int vocab_size);

struct EncodedRow {
    std::vector<int> tokens; // prompt  SEP  answer (unpadded)
    std::vector<int> labels; // kIgnoreLabel outside the answer span
    int t_star = 0;          // index of SEP
    TaskKind task = TaskKind::copy;
};

EncodedRow encode(const Sample& s, int max_seq_len, int vocab_size);
Sample decode(const EncodedRow& row, int vocab_size);

// Right-padded rectangular batch with per-row true lengths.
struct Batch {
    int rows = 0;
    int cols = 0;
    std::vector<int> tokens;
    std::vector<int> labels;
    std::vector<int> length;
    std::vector<int> t_star;
    std::vector<uint8_t> answer_mask;
    std::vector<TaskKind> task;

    std::span<const int> row_tokens(int b) const;
    std::span<const int> row_labels(int b) const;
    std::span<const uint8_t> row_mask(int b) const;
};

Batch make_batch(std::span<const EncodedRow> rows, int vocab_size);

// Line-delimited dataset dump: "task|p0 p1 ...|a0 a1 ...".
void dump_dataset(std::span<const Sample> samples, const std::filesystem::path& path);
std::vector<Sample> load_dataset(const std::filesystem::path& path);

struct EvalResult {
    int correct = 0;
    int total = 0;
    double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

// Greedy autoregressive decode of each answer, exact match; the echo path is
// never invoked (no injection context, no extraction).
EvalResult eval_accuracy(const FrozenWeights& w, const AdapterSet& adapters,
                         std::span<const Sample> samples);

// Same scoring driven by an arbitrary decoder, for harness-level tests.
using DecodeFn = std::function<std::vector<int>(const Sample&)>;
EvalResult eval_with_decoder(std::span<const Sample> samples, const DecodeFn& decoder);

} // namespace echotune
