#include "immlab/tasks.hpp"

#include "immlab/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace immlab::tasks {

using nlohmann::json;

std::string_view to_string(TaskKind k) {
    switch (k) {
    case TaskKind::Add:
        return "ADD";
    case TaskKind::Sub:
        return "SUB";
    case TaskKind::LongAdd:
        return "LONG_ADD";
    case TaskKind::Mul1:
        return "MUL1";
    }
    return "?";
}

TaskKind parse_task_kind(std::string_view s) {
    for (TaskKind k : kAllKinds) {
        if (s == to_string(k)) {
            return k;
        }
    }
    throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

bool is_in_domain(TaskKind k) { return k == TaskKind::Add; }

// ---- vocabulary -------------------------------------------------------------

namespace {

constexpr std::array<TokenId, 256> make_char_table() {
    std::array<TokenId, 256> table{};
    for (auto& t : table) {
        t = -1;
    }
    for (std::size_t i = 0; i < kVocabChars.size(); ++i) {
        table[static_cast<unsigned char>(kVocabChars[i])] = static_cast<TokenId>(3 + i);
    }
    return table;
}

constexpr auto kCharTable = make_char_table();

} // namespace

std::vector<TokenId> tokenize(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char c : text) {
        const TokenId id = kCharTable[static_cast<unsigned char>(c)];
        if (id < 0) {
            throw DataError(std::string("character '") + c + "' is not in the vocabulary");
        }
        ids.push_back(id);
    }
    return ids;
}

std::string detokenize(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id >= 3 && static_cast<std::size_t>(id) < kVocabSize) {
            out.push_back(kVocabChars[static_cast<std::size_t>(id - 3)]);
        }
    }
    return out;
}

TokenizedPair tokenize_pair(std::string_view prompt, std::string_view completion) {
    TokenizedPair p;
    p.tokens.push_back(kBos);
    for (TokenId id : tokenize(prompt)) {
        p.tokens.push_back(id);
    }
    p.loss_mask.assign(p.tokens.size(), 0);
    for (TokenId id : tokenize(completion)) {
        p.tokens.push_back(id);
        p.loss_mask.push_back(1);
    }
    p.tokens.push_back(kEos);
    p.loss_mask.push_back(1);
    return p;
}

std::vector<TokenId> tokenize_prompt(std::string_view prompt) {
    std::vector<TokenId> ids{kBos};
    for (TokenId id : tokenize(prompt)) {
        ids.push_back(id);
    }
    return ids;
}

// ---- generators -------------------------------------------------------------

DigitRange default_digit_range(TaskKind k) {
    return k == TaskKind::LongAdd ? DigitRange{4, 5} : DigitRange{2, 3};
}

namespace {

std::vector<int> digits_lsb_first(std::uint64_t v) {
    std::vector<int> d;
    do {
        d.push_back(static_cast<int>(v % 10));
        v /= 10;
    } while (v != 0);
    return d;
}

int digit_at(const std::vector<int>& d, std::size_t i) { return i < d.size() ? d[i] : 0; }

std::string render_add(std::uint64_t a, std::uint64_t b) {
    const auto da = digits_lsb_first(a);
    const auto db = digits_lsb_first(b);
    const std::size_t cols = std::max(da.size(), db.size());
    std::string r;
    int carry = 0;
    for (std::size_t i = 0; i < cols; ++i) {
        const int x = digit_at(da, i);
        const int y = digit_at(db, i);
        const int s = x + y + carry;
        r += std::to_string(x) + "+" + std::to_string(y);
        if (carry) {
            r += ",c1";
        }
        r += "=" + std::to_string(s);
        carry = s >= 10 ? 1 : 0;
        if (carry) {
            r += ",c1";
        }
        r += ";";
    }
    return r + "ANS " + std::to_string(a + b);
}

std::string render_sub(std::uint64_t a, std::uint64_t b) {
    const auto da = digits_lsb_first(a);
    const auto db = digits_lsb_first(b);
    std::string r;
    int borrow = 0;
    for (std::size_t i = 0; i < da.size(); ++i) {
        const int x = digit_at(da, i);
        const int y = digit_at(db, i);
        int v = x - y - borrow;
        r += std::to_string(x) + "-" + std::to_string(y);
        if (borrow) {
            r += ",b1";
        }
        borrow = v < 0 ? 1 : 0;
        if (borrow) {
            v += 10;
        }
        r += "=" + std::to_string(v);
        if (borrow) {
            r += ",b1";
        }
        r += ";";
    }
    return r + "ANS " + std::to_string(a - b);
}

std::string render_mul1(std::uint64_t a, std::uint64_t m) {
    const auto da = digits_lsb_first(a);
    std::string r;
    std::uint64_t carry = 0;
    for (int x : da) {
        const std::uint64_t v = static_cast<std::uint64_t>(x) * m + carry;
        r += std::to_string(x) + "*" + std::to_string(m);
        if (carry) {
            r += ",c" + std::to_string(carry);
        }
        r += "=" + std::to_string(v);
        carry = v / 10;
        if (carry) {
            r += ",c" + std::to_string(carry);
        }
        r += ";";
    }
    return r + "ANS " + std::to_string(a * m);
}

void check_range(DigitRange r) {
    if (r.min_digits < 1 || r.max_digits < r.min_digits || r.max_digits > 18) {
        throw ConfigError("invalid digit range [" + std::to_string(r.min_digits) + ", " +
                          std::to_string(r.max_digits) + "]");
    }
}

std::uint64_t pow10(int n) {
    std::uint64_t v = 1;
    for (int i = 0; i < n; ++i) {
        v *= 10;
    }
    return v;
}

std::uint64_t draw_operand(SeededStream& s, DigitRange r) {
    const int n = r.min_digits + static_cast<int>(s.next_below(
                                     static_cast<std::uint64_t>(r.max_digits - r.min_digits + 1)));
    const std::uint64_t lo = n == 1 ? 0 : pow10(n - 1);
    const std::uint64_t hi = pow10(n);
    return lo + s.next_below(hi - lo);
}

} // namespace

ReasoningExample make_example(TaskKind kind, std::uint64_t a, std::uint64_t b) {
    ReasoningExample e;
    e.kind = kind;
    switch (kind) {
    case TaskKind::Add:
    case TaskKind::LongAdd:
        e.prompt = "Q:" + std::to_string(a) + "+" + std::to_string(b) + "=";
        e.rationale = render_add(a, b);
        e.final_answer = std::to_string(a + b);
        break;
    case TaskKind::Sub:
        if (a < b) {
            throw ConfigError("SUB example requires a >= b");
        }
        e.prompt = "Q:" + std::to_string(a) + "-" + std::to_string(b) + "=";
        e.rationale = render_sub(a, b);
        e.final_answer = std::to_string(a - b);
        break;
    case TaskKind::Mul1:
        if (b > 9) {
            throw ConfigError("MUL1 example requires a single-digit multiplier");
        }
        e.prompt = "Q:" + std::to_string(a) + "*" + std::to_string(b) + "=";
        e.rationale = render_mul1(a, b);
        e.final_answer = std::to_string(a * b);
        break;
    }
    return e;
}

ReasoningExample gen_example(TaskKind kind, SeededStream& stream, DigitRange range) {
    check_range(range);
    std::uint64_t a = draw_operand(stream, range);
    std::uint64_t b = 0;
    if (kind == TaskKind::Mul1) {
        b = 2 + stream.next_below(8);
    } else {
        b = draw_operand(stream, range);
    }
    if (kind == TaskKind::Sub && a < b) {
        std::swap(a, b);
    }
    return make_example(kind, a, b);
}

ReasoningExample gen_example(TaskKind kind, SeededStream& stream) {
    return gen_example(kind, stream, default_digit_range(kind));
}

std::optional<std::string> extract_final_answer(std::string_view completion) {
    constexpr std::string_view marker = "ANS ";
    const auto pos = completion.rfind(marker);
    if (pos == std::string_view::npos) {
        return std::nullopt;
    }
    std::size_t i = pos + marker.size();
    while (i < completion.size() && completion[i] == ' ') {
        ++i;
    }
    std::size_t j = i;
    while (j < completion.size() && completion[j] >= '0' && completion[j] <= '9') {
        ++j;
    }
    if (j == i) {
        return std::nullopt;
    }
    return std::string(completion.substr(i, j - i));
}

namespace {

std::string_view strip_leading_zeros(std::string_view s) {
    const auto nz = s.find_first_not_of('0');
    if (nz == std::string_view::npos) {
        return s.empty() ? s : s.substr(s.size() - 1);
    }
    return s.substr(nz);
}

} // namespace

bool verify(std::string_view example_answer, std::string_view model_completion) {
    const auto got = extract_final_answer(model_completion);
    if (!got) {
        return false;
    }
    return strip_leading_zeros(*got) == strip_leading_zeros(example_answer);
}

// ---- corpora ----------------------------------------------------------------

std::array<std::size_t, 4> CorpusSpec::counts() const {
    double sum = 0.0;
    for (double f : mixture) {
        if (!(f >= 0.0)) {
            throw ConfigError("corpus mixture fractions must be nonnegative");
        }
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError("corpus mixture fractions must sum to 1");
    }
    std::array<std::size_t, 4> c{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = static_cast<std::size_t>(std::floor(static_cast<double>(total) * mixture[i] + 1e-9));
        assigned += c[i];
    }
    c[0] += total - assigned;
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (c[i] == 0) {
            throw ConfigError("corpus count for " + std::string(to_string(kAllKinds[i])) + " is zero");
        }
    }
    return c;
}

std::vector<ReasoningExample> build_pretrain_corpus(const CorpusSpec& spec, SeededStream& stream) {
    const auto counts = spec.counts();
    std::vector<ReasoningExample> corpus;
    corpus.reserve(spec.total);
    for (std::size_t k = 0; k < kAllKinds.size(); ++k) {
        for (std::size_t i = 0; i < counts[k]; ++i) {
            corpus.push_back(gen_example(kAllKinds[k], stream));
        }
    }
    shuffle(corpus, stream);
    return corpus;
}

std::string to_jsonl_line(const ReasoningExample& e) {
    json j = {{"prompt", e.prompt},
              {"rationale", e.rationale},
              {"final_answer", e.final_answer},
              {"kind", std::string(to_string(e.kind))}};
    return j.dump();
}

void save_jsonl(const std::vector<ReasoningExample>& examples, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    for (const auto& e : examples) {
        out << to_jsonl_line(e) << '\n';
    }
    out.flush();
    if (!out) {
        throw IoError("write to '" + path.string() + "' failed");
    }
}

std::vector<ReasoningExample> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open dataset '" + path.string() + "'");
    }
    std::vector<ReasoningExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            const json j = json::parse(line);
            ReasoningExample e;
            e.prompt = j.at("prompt").get<std::string>();
            e.rationale = j.at("rationale").get<std::string>();
            e.final_answer = j.at("final_answer").get<std::string>();
            e.kind = parse_task_kind(j.at("kind").get<std::string>());
            out.push_back(std::move(e));
        } catch (const json::exception& ex) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return out;
}

} // namespace immlab::tasks
