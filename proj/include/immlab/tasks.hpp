#pragma once

#include "immlab/rng.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace immlab::tasks {

// ADD is the in-domain family; the other three are held out.
enum class TaskKind { Add, Sub, LongAdd, Mul1 };

inline constexpr std::array<TaskKind, 4> kAllKinds = {TaskKind::Add, TaskKind::Sub,
                                                      TaskKind::LongAdd, TaskKind::Mul1};

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);
bool is_in_domain(TaskKind k);

struct ReasoningExample {
    std::string prompt;       // "Q:47+36="
    std::string rationale;    // "7+6=13,c1;4+3,c1=8;ANS 83"
    std::string final_answer; // "83"
    TaskKind kind = TaskKind::Add;

    friend bool operator==(const ReasoningExample&, const ReasoningExample&) = default;
};

// ---- vocabulary -------------------------------------------------------------

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;

// Text characters in id order, starting at id 3.
inline constexpr std::string_view kVocabChars = "0123456789+-*=;,cANSQ: b";
inline constexpr std::size_t kVocabSize = 3 + kVocabChars.size();

// Character-level. Throws DataError on a character outside the vocabulary.
std::vector<TokenId> tokenize(std::string_view text);
// Special tokens render as nothing.
std::string detokenize(std::span<const TokenId> ids);

// BOS + prompt + completion + EOS, with a mask marking the completion and EOS
// positions as prediction targets.
struct TokenizedPair {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> loss_mask;
};
TokenizedPair tokenize_pair(std::string_view prompt, std::string_view completion);
// BOS + prompt, ready for sampling.
std::vector<TokenId> tokenize_prompt(std::string_view prompt);

// ---- generators -------------------------------------------------------------

struct DigitRange {
    int min_digits = 2;
    int max_digits = 3;
};

DigitRange default_digit_range(TaskKind k);

// Renders a worked example for explicit operands. SUB requires a >= b;
// MUL1 requires 0 <= b <= 9.
ReasoningExample make_example(TaskKind kind, std::uint64_t a, std::uint64_t b);

// Draws operands from the stream and renders them.
ReasoningExample gen_example(TaskKind kind, SeededStream& stream, DigitRange range);
ReasoningExample gen_example(TaskKind kind, SeededStream& stream);

// Digit run after the last "ANS " marker.
std::optional<std::string> extract_final_answer(std::string_view completion);

// Leading-zero-insensitive comparison of the extracted answer.
bool verify(std::string_view example_answer, std::string_view model_completion);

// ---- corpora ----------------------------------------------------------------

struct CorpusSpec {
    std::size_t total = 20000;
    // Fractions per kind in kAllKinds order.
    std::array<double, 4> mixture = {0.6, 0.2, 0.1, 0.1};

    std::array<std::size_t, 4> counts() const;
};

std::vector<ReasoningExample> build_pretrain_corpus(const CorpusSpec& spec, SeededStream& stream);

// Deterministic Fisher-Yates shuffle driven by the stream.
template <class T>
void shuffle(std::vector<T>& items, SeededStream& stream) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = stream.next_below(i);
        std::swap(items[i - 1], items[j]);
    }
}

// JSON Lines with keys prompt, rationale, final_answer, kind.
void save_jsonl(const std::vector<ReasoningExample>& examples, const std::filesystem::path& path);
std::vector<ReasoningExample> load_jsonl(const std::filesystem::path& path);
std::string to_jsonl_line(const ReasoningExample& e);

} // namespace immlab::tasks
