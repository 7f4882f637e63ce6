#pragma once

// Synthetic three-operand arithmetic dataset: parsing, exact evaluation,
// enumeration under a filter policy, operator labels and JSONL records.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace arithlens {

enum class Op : std::uint8_t { Add, Sub, Mul, Div };

char symbol(Op op);
/// Single-letter name used in operator labels: p, s, m, d.
char label_letter(Op op);
/// 1 binds tighter ({*, /}), 2 binds looser ({+, -}).
int precedence_level(Op op);
std::optional<Op> op_from_symbol(char c);

enum class Variant : std::uint8_t {
    LeftParen,          // ( a o1 b ) o2 c
    RightParen,         // a o1 ( b o2 c )
    FlippedLeftParen,   // ( a o2 b ) o1 c
    FlippedRightParen,  // a o2 ( b o1 c )
    NoParenNatural,     // a o1 b o2 c
    NoParenFlipped,     // a o2 b o1 c
};

inline constexpr std::array<Variant, 6> kAllVariants{
    Variant::LeftParen,      Variant::RightParen,     Variant::FlippedLeftParen,
    Variant::FlippedRightParen, Variant::NoParenNatural, Variant::NoParenFlipped};

std::string_view variant_name(Variant v);
std::optional<Variant> variant_from_name(std::string_view name);
bool is_no_paren(Variant v);

struct OperatorPair {
    Op first;
    Op second;
};

inline constexpr std::array<OperatorPair, 4> kMixedPairs{{
    {Op::Add, Op::Mul},
    {Op::Sub, Op::Mul},
    {Op::Add, Op::Div},
    {Op::Sub, Op::Div},
}};

/// Which evaluation results are admissible. Division must always be exact and
/// never by zero; the policies differ in the lower bound on every step.
enum class FilterPolicy : std::uint8_t {
    NonNegativeWhole,  // every step an integer >= 0 (default; yields 8,547 prompts)
    PositiveWhole,     // every step an integer >= 1
    Unfiltered,        // keep every candidate, even undefined ones
};

inline constexpr FilterPolicy kDefaultFilter = FilterPolicy::NonNegativeWhole;

std::string_view filter_name(FilterPolicy p);
std::optional<FilterPolicy> filter_from_name(std::string_view name);

enum class ExprErrc {
    MalformedExpression,
    UnbalancedParentheses,
    WrongOperandCount,
    NonWholeResult,
    NonPositiveResult,
    DivisionByZero,
    EqualPrecedencePair,
    EmptyOperandRange,
};

class ExprError : public std::runtime_error {
public:
    ExprError(ExprErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExprErrc code() const noexcept { return code_; }

private:
    ExprErrc code_;
};

/// Parsed arithmetic expression. A node is a leaf when `op` is empty.
struct AstNode {
    std::int64_t value = 0;
    std::optional<Op> op;
    bool grouped = false;
    int op_position = 0;  // 1-based order of appearance of the operator in the text
    std::unique_ptr<AstNode> lhs;
    std::unique_ptr<AstNode> rhs;

    bool is_leaf() const { return !op.has_value(); }
};

struct Ast {
    std::unique_ptr<AstNode> root;
    bool has_equals = false;
};

Ast parse_expression(std::string_view text);
/// Canonical text: single spaces between tokens, trailing " = " when the
/// source had an equals sign.
std::string render(const Ast& ast);

struct Evaluation {
    std::int64_t intermediate = 0;
    std::int64_t final_value = 0;
};

/// Exact rational evaluation. `intermediate` is the value of the sub-expression
/// evaluated first. Throws ExprError when a step violates `policy`.
Evaluation evaluate(const Ast& ast, FilterPolicy policy = FilterPolicy::PositiveWhole);
Evaluation eval_expression(std::string_view text, FilterPolicy policy = FilterPolicy::PositiveWhole);

/// Value obtained when the two operators' precedence ranks are exchanged.
/// Empty for parenthesized expressions and when any step violates `policy`.
std::optional<std::int64_t> eval_swapped_precedence(const Ast& ast,
                                                    FilterPolicy policy = FilterPolicy::PositiveWhole);
std::optional<std::int64_t> eval_swapped_precedence(std::string_view text,
                                                    FilterPolicy policy = FilterPolicy::PositiveWhole);

struct OperatorLabel {
    int position = 0;         // 1 or 2, order of appearance
    Op op = Op::Add;
    int precedence_rank = 0;  // 1 or 2, order of evaluation

    std::string surface() const;
    friend bool operator==(const OperatorLabel&, const OperatorLabel&) = default;
};

std::array<OperatorLabel, 2> operator_labels(const Ast& ast);
std::array<OperatorLabel, 2> operator_labels(std::string_view text);

struct Expression {
    int a = 0, b = 0, c = 0;
    Op o1 = Op::Add, o2 = Op::Mul;
    Variant variant = Variant::LeftParen;
    std::string text;
    std::int64_t intermediate = 0;
    std::int64_t final_value = 0;
    std::optional<std::int64_t> swapped_final;
    std::array<OperatorLabel, 2> labels{};
    bool valid = true;  // false only for Unfiltered candidates that fail evaluation

    bool degenerate() const { return intermediate == final_value; }
    /// Token positions (BOS-prefixed) of the first and second operator.
    std::array<int, 2> operator_positions() const;
};

/// Canonical prompt text for one (a, b, c, pair, variant) combination.
std::string expression_text(int a, int b, int c, Op o1, Op o2, Variant v);

/// Builds and evaluates one combination. Empty when filtered out.
std::optional<Expression> make_expression(int a, int b, int c, Op o1, Op o2, Variant v,
                                          FilterPolicy policy = kDefaultFilter);

/// Expression record for arbitrary canonical prompt text. Throws ExprError
/// when the text is malformed, mixes two operators of equal precedence, or
/// fails the filter.
Expression expression_from_text(std::string_view text, FilterPolicy policy = kDefaultFilter);

/// The no-paren prompt with its two operator tokens exchanged.
std::optional<Expression> exchanged_prompt(const Expression& e, FilterPolicy policy = kDefaultFilter);

/// Lexicographic over (a, b, c, pair index, variant index).
std::vector<Expression> enumerate_dataset(std::span<const int> operands,
                                          std::span<const OperatorPair> pairs,
                                          FilterPolicy policy = kDefaultFilter);
std::vector<Expression> enumerate_default_dataset(FilterPolicy policy = kDefaultFilter);

std::string to_jsonl(const Expression& e);
Expression from_jsonl(std::string_view line);

std::vector<Expression> read_dataset(const std::string& path);
void write_dataset(const std::string& path, std::span<const Expression> data);

/// FNV-1a over the JSONL serialization; identifies a dataset in checkpoints.
std::uint64_t dataset_hash(std::span<const Expression> data);

}  // namespace arithlens
