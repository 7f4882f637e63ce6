#include "arithlens/exprgen.hpp"

#include <fstream>
#include <numeric>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "arithlens/vocab.hpp"

namespace arithlens {

char symbol(Op op) {
    switch (op) {
        case Op::Add: return '+';
        case Op::Sub: return '-';
        case Op::Mul: return '*';
        case Op::Div: return '/';
    }
    return '?';
}

char label_letter(Op op) {
    switch (op) {
        case Op::Add: return 'p';
        case Op::Sub: return 's';
        case Op::Mul: return 'm';
        case Op::Div: return 'd';
    }
    return '?';
}

int precedence_level(Op op) { return (op == Op::Mul || op == Op::Div) ? 1 : 2; }

std::optional<Op> op_from_symbol(char c) {
    switch (c) {
        case '+': return Op::Add;
        case '-': return Op::Sub;
        case '*': return Op::Mul;
        case '/': return Op::Div;
        default: return std::nullopt;
    }
}

namespace {
constexpr std::array<std::string_view, 6> kVariantNames{
    "LeftParen", "RightParen", "FlippedLeftParen", "FlippedRightParen", "NoParenNatural", "NoParenFlipped"};
}

std::string_view variant_name(Variant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

std::optional<Variant> variant_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kVariantNames.size(); ++i) {
        if (kVariantNames[i] == name) return kAllVariants[i];
    }
    return std::nullopt;
}

bool is_no_paren(Variant v) { return v == Variant::NoParenNatural || v == Variant::NoParenFlipped; }

std::string_view filter_name(FilterPolicy p) {
    switch (p) {
        case FilterPolicy::NonNegativeWhole: return "non-negative-whole";
        case FilterPolicy::PositiveWhole: return "positive-whole";
        case FilterPolicy::Unfiltered: return "unfiltered";
    }
    return "?";
}

std::optional<FilterPolicy> filter_from_name(std::string_view name) {
    for (auto p : {FilterPolicy::NonNegativeWhole, FilterPolicy::PositiveWhole, FilterPolicy::Unfiltered}) {
        if (filter_name(p) == name) return p;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

enum class LexKind { Number, Operator, LParen, RParen, Equals };

struct Lexeme {
    LexKind kind;
    std::int64_t value = 0;
    Op op = Op::Add;
};

std::vector<Lexeme> lex(std::string_view text) {
    std::vector<Lexeme> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const char ch = text[i];
        if (ch == ' ' || ch == '\t') {
            ++i;
        } else if (ch >= '0' && ch <= '9') {
            std::int64_t v = 0;
            while (i < text.size() && text[i] >= '0' && text[i] <= '9') {
                v = v * 10 + (text[i] - '0');
                if (v > 1'000'000) throw ExprError(ExprErrc::MalformedExpression, "operand too large");
                ++i;
            }
            out.push_back({LexKind::Number, v});
        } else if (auto op = op_from_symbol(ch)) {
            out.push_back({LexKind::Operator, 0, *op});
            ++i;
        } else if (ch == '(') {
            out.push_back({LexKind::LParen});
            ++i;
        } else if (ch == ')') {
            out.push_back({LexKind::RParen});
            ++i;
        } else if (ch == '=') {
            out.push_back({LexKind::Equals});
            ++i;
        } else {
            throw ExprError(ExprErrc::MalformedExpression, std::string("unexpected character '") + ch + "'");
        }
    }
    return out;
}

class Parser {
public:
    explicit Parser(std::vector<Lexeme> lexemes) : lx_(std::move(lexemes)) {}

    Ast parse() {
        std::size_t end = lx_.size();
        Ast ast;
        if (end > 0 && lx_[end - 1].kind == LexKind::Equals) {
            ast.has_equals = true;
            --end;
        }
        end_ = end;
        int depth = 0, groups = 0, numbers = 0;
        for (std::size_t i = 0; i < end_; ++i) {
            switch (lx_[i].kind) {
                case LexKind::LParen: ++depth; ++groups; break;
                case LexKind::RParen:
                    if (--depth < 0) throw ExprError(ExprErrc::UnbalancedParentheses, "unmatched ')'");
                    break;
                case LexKind::Number: ++numbers; break;
                case LexKind::Equals: throw ExprError(ExprErrc::MalformedExpression, "'=' must be last");
                default: break;
            }
        }
        if (depth != 0) throw ExprError(ExprErrc::UnbalancedParentheses, "unmatched '('");
        if (groups > 1) throw ExprError(ExprErrc::MalformedExpression, "at most one pair of parentheses");
        if (numbers != 3) {
            throw ExprError(ExprErrc::WrongOperandCount, "expected 3 operands, found " + std::to_string(numbers));
        }
        ast.root = parse_sum();
        if (pos_ != end_) throw ExprError(ExprErrc::MalformedExpression, "trailing tokens");
        if (ast.root->grouped) throw ExprError(ExprErrc::MalformedExpression, "redundant outer parentheses");
        return ast;
    }

private:
    const Lexeme* peek() const { return pos_ < end_ ? &lx_[pos_] : nullptr; }

    std::unique_ptr<AstNode> binary(Op op, std::unique_ptr<AstNode> l, std::unique_ptr<AstNode> r, int position) {
        auto n = std::make_unique<AstNode>();
        n->op = op;
        n->op_position = position;
        n->lhs = std::move(l);
        n->rhs = std::move(r);
        return n;
    }

    std::unique_ptr<AstNode> parse_sum() {
        auto lhs = parse_product();
        while (const Lexeme* t = peek()) {
            if (t->kind != LexKind::Operator || precedence_level(t->op) != 2) break;
            const Op op = t->op;
            ++pos_;
            const int position = ++ops_seen_;
            lhs = binary(op, std::move(lhs), parse_product(), position);
        }
        return lhs;
    }

    std::unique_ptr<AstNode> parse_product() {
        auto lhs = parse_atom();
        while (const Lexeme* t = peek()) {
            if (t->kind != LexKind::Operator || precedence_level(t->op) != 1) break;
            const Op op = t->op;
            ++pos_;
            const int position = ++ops_seen_;
            lhs = binary(op, std::move(lhs), parse_atom(), position);
        }
        return lhs;
    }

    std::unique_ptr<AstNode> parse_atom() {
        const Lexeme* t = peek();
        if (t == nullptr) throw ExprError(ExprErrc::MalformedExpression, "unexpected end of expression");
        if (t->kind == LexKind::Number) {
            ++pos_;
            auto n = std::make_unique<AstNode>();
            n->value = t->value;
            return n;
        }
        if (t->kind == LexKind::LParen) {
            ++pos_;
            auto inner = parse_sum();
            const Lexeme* close = peek();
            if (close == nullptr || close->kind != LexKind::RParen) {
                throw ExprError(ExprErrc::UnbalancedParentheses, "expected ')'");
            }
            ++pos_;
            if (inner->is_leaf()) throw ExprError(ExprErrc::MalformedExpression, "parenthesized single operand");
            inner->grouped = true;
            return inner;
        }
        throw ExprError(ExprErrc::MalformedExpression, "expected operand");
    }

    std::vector<Lexeme> lx_;
    std::size_t pos_ = 0;
    std::size_t end_ = 0;
    int ops_seen_ = 0;
};

void render_node(const AstNode& n, std::string& out) {
    if (n.is_leaf()) {
        out += std::to_string(n.value);
        out += ' ';
        return;
    }
    if (n.grouped) out += "( ";
    render_node(*n.lhs, out);
    out += symbol(*n.op);
    out += ' ';
    render_node(*n.rhs, out);
    if (n.grouped) out += ") ";
}

// Exact rational with int64 parts; values here stay tiny.
struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;

    static Rational make(std::int64_t n, std::int64_t d) {
        if (d < 0) {
            n = -n;
            d = -d;
        }
        const std::int64_t g = std::gcd(n < 0 ? -n : n, d);
        return {n / (g == 0 ? 1 : g), d / (g == 0 ? 1 : g)};
    }
};

std::optional<Rational> apply(Op op, Rational l, Rational r) {
    switch (op) {
        case Op::Add: return Rational::make(l.num * r.den + r.num * l.den, l.den * r.den);
        case Op::Sub: return Rational::make(l.num * r.den - r.num * l.den, l.den * r.den);
        case Op::Mul: return Rational::make(l.num * r.num, l.den * r.den);
        case Op::Div:
            if (r.num == 0) return std::nullopt;
            return Rational::make(l.num * r.den, l.den * r.num);
    }
    return std::nullopt;
}

// Checks one evaluation step against the policy; returns an error code on violation.
std::optional<ExprErrc> check_step(const std::optional<Rational>& v, FilterPolicy policy) {
    if (!v) return ExprErrc::DivisionByZero;
    if (policy == FilterPolicy::Unfiltered) return std::nullopt;
    if (v->den != 1) return ExprErrc::NonWholeResult;
    const std::int64_t lower = policy == FilterPolicy::PositiveWhole ? 1 : 0;
    if (v->num < lower) return ExprErrc::NonPositiveResult;
    return std::nullopt;
}

// The binary node whose operands are both leaves; with three operands there is exactly one.
const AstNode& inner_node(const AstNode& root) {
    if (!root.lhs->is_leaf()) return *root.lhs;
    if (!root.rhs->is_leaf()) return *root.rhs;
    throw ExprError(ExprErrc::WrongOperandCount, "expression needs two operators");
}

struct StepResult {
    std::optional<Rational> inner;
    std::optional<Rational> outer;
};

// Evaluates "root_op(inner_op(x, y), z)" or "root_op(x, inner_op(y, z))".
StepResult evaluate_shape(Op root_op, Op inner_op, bool inner_left, std::int64_t x, std::int64_t y,
                          std::int64_t z) {
    StepResult r;
    if (inner_left) {
        r.inner = apply(inner_op, {x, 1}, {y, 1});
        if (r.inner) r.outer = apply(root_op, *r.inner, {z, 1});
    } else {
        r.inner = apply(inner_op, {y, 1}, {z, 1});
        if (r.inner) r.outer = apply(root_op, {x, 1}, *r.inner);
    }
    return r;
}

struct Shape {
    Op root_op;
    Op inner_op;
    bool inner_left;
    std::int64_t x, y, z;
};

Shape shape_of(const AstNode& root) {
    if (root.is_leaf()) throw ExprError(ExprErrc::WrongOperandCount, "expression needs two operators");
    const AstNode& inner = inner_node(root);
    const bool inner_left = !root.lhs->is_leaf();
    const AstNode& other = inner_left ? *root.rhs : *root.lhs;
    if (inner_left) return {*root.op, *inner.op, true, inner.lhs->value, inner.rhs->value, other.value};
    return {*root.op, *inner.op, false, other.value, inner.lhs->value, inner.rhs->value};
}

std::string errc_message(ExprErrc c) {
    switch (c) {
        case ExprErrc::DivisionByZero: return "division by zero";
        case ExprErrc::NonWholeResult: return "non-whole intermediate or final result";
        case ExprErrc::NonPositiveResult: return "result below the admissible lower bound";
        default: return "evaluation error";
    }
}

}  // namespace

Ast parse_expression(std::string_view text) { return Parser(lex(text)).parse(); }

std::string render(const Ast& ast) {
    std::string out;
    render_node(*ast.root, out);
    if (ast.has_equals) out += "= ";
    else if (!out.empty()) out.pop_back();
    return out;
}

Evaluation evaluate(const Ast& ast, FilterPolicy policy) {
    const Shape s = shape_of(*ast.root);
    const StepResult r = evaluate_shape(s.root_op, s.inner_op, s.inner_left, s.x, s.y, s.z);
    if (auto e = check_step(r.inner, policy)) throw ExprError(*e, errc_message(*e));
    if (auto e = check_step(r.outer, policy)) throw ExprError(*e, errc_message(*e));
    if (r.inner->den != 1 || r.outer->den != 1) {
        throw ExprError(ExprErrc::NonWholeResult, errc_message(ExprErrc::NonWholeResult));
    }
    return {r.inner->num, r.outer->num};
}

Evaluation eval_expression(std::string_view text, FilterPolicy policy) {
    return evaluate(parse_expression(text), policy);
}

std::optional<std::int64_t> eval_swapped_precedence(const Ast& ast, FilterPolicy policy) {
    const AstNode& root = *ast.root;
    const Shape s = shape_of(root);
    if (inner_node(root).grouped) return std::nullopt;
    // Same text, opposite grouping: the operator that was evaluated second now goes first.
    const std::int64_t a = s.x, b = s.y, c = s.z;
    const Op first_text_op = s.inner_left ? s.inner_op : s.root_op;
    const Op second_text_op = s.inner_left ? s.root_op : s.inner_op;
    const bool swapped_inner_left = !s.inner_left;
    const StepResult r = swapped_inner_left ? evaluate_shape(second_text_op, first_text_op, true, a, b, c)
                                            : evaluate_shape(first_text_op, second_text_op, false, a, b, c);
    if (check_step(r.inner, policy) || check_step(r.outer, policy)) return std::nullopt;
    if (r.outer->den != 1 || r.inner->den != 1) return std::nullopt;
    return r.outer->num;
}

std::optional<std::int64_t> eval_swapped_precedence(std::string_view text, FilterPolicy policy) {
    return eval_swapped_precedence(parse_expression(text), policy);
}

std::string OperatorLabel::surface() const {
    std::string s;
    s += static_cast<char>('0' + position);
    s += label_letter(op);
    s += static_cast<char>('0' + precedence_rank);
    return s;
}

std::array<OperatorLabel, 2> operator_labels(const Ast& ast) {
    const AstNode& root = *ast.root;
    const AstNode& inner = inner_node(root);
    std::array<OperatorLabel, 2> labels{};
    for (const AstNode* n : {&root, &inner}) {
        OperatorLabel l;
        l.position = n->op_position;
        l.op = *n->op;
        l.precedence_rank = (n == &inner) ? 1 : 2;
        labels[static_cast<std::size_t>(l.position - 1)] = l;
    }
    return labels;
}

std::array<OperatorLabel, 2> operator_labels(std::string_view text) {
    return operator_labels(parse_expression(text));
}

std::array<int, 2> Expression::operator_positions() const {
    std::array<int, 2> out{};
    int found = 0;
    int token = 1;  // index 0 is BOS
    std::istringstream in(text);
    std::string lexeme;
    while (in >> lexeme && found < 2) {
        if (lexeme.size() == 1 && op_from_symbol(lexeme[0])) out[static_cast<std::size_t>(found++)] = token;
        ++token;
    }
    return out;
}

std::string expression_text(int a, int b, int c, Op o1, Op o2, Variant v) {
    const std::string A = std::to_string(a), B = std::to_string(b), C = std::to_string(c);
    const std::string p = std::string(1, symbol(o1)), q = std::string(1, symbol(o2));
    switch (v) {
        case Variant::LeftParen: return "( " + A + " " + p + " " + B + " ) " + q + " " + C + " = ";
        case Variant::RightParen: return A + " " + p + " ( " + B + " " + q + " " + C + " ) = ";
        case Variant::FlippedLeftParen: return "( " + A + " " + q + " " + B + " ) " + p + " " + C + " = ";
        case Variant::FlippedRightParen: return A + " " + q + " ( " + B + " " + p + " " + C + " ) = ";
        case Variant::NoParenNatural: return A + " " + p + " " + B + " " + q + " " + C + " = ";
        case Variant::NoParenFlipped: return A + " " + q + " " + B + " " + p + " " + C + " = ";
    }
    return {};
}

std::optional<Expression> make_expression(int a, int b, int c, Op o1, Op o2, Variant v, FilterPolicy policy) {
    Expression e;
    e.a = a;
    e.b = b;
    e.c = c;
    e.o1 = o1;
    e.o2 = o2;
    e.variant = v;
    e.text = expression_text(a, b, c, o1, o2, v);
    const Ast ast = parse_expression(e.text);
    e.labels = operator_labels(ast);
    try {
        const Evaluation ev = evaluate(ast, policy);
        e.intermediate = ev.intermediate;
        e.final_value = ev.final_value;
    } catch (const ExprError&) {
        if (policy != FilterPolicy::Unfiltered) return std::nullopt;
        e.valid = false;
    }
    if (e.valid) {
        e.swapped_final = eval_swapped_precedence(
            ast, policy == FilterPolicy::Unfiltered ? FilterPolicy::NonNegativeWhole : policy);
    }
    return e;
}

Expression expression_from_text(std::string_view text, FilterPolicy policy) {
    const Ast ast = parse_expression(text);
    evaluate(ast, policy);
    std::vector<int> numbers;
    std::vector<Op> ops;
    std::ptrdiff_t paren = -1;
    const auto tokens = tokenize(render(ast));
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        const int t = tokens[i];
        if (t <= vocab::kMaxInteger) numbers.push_back(t);
        if (t == vocab::kLParen) paren = static_cast<std::ptrdiff_t>(i) - 1;
        if (t >= vocab::kPlus && t <= vocab::kDivide) ops.push_back(*op_from_symbol(vocab::lexeme(t)[0]));
    }
    if (precedence_level(ops[0]) == precedence_level(ops[1])) {
        throw ExprError(ExprErrc::EqualPrecedencePair, "operators have equal precedence");
    }
    const bool natural = precedence_level(ops[0]) == 2;
    const Op additive = natural ? ops[0] : ops[1];
    const Op multiplicative = natural ? ops[1] : ops[0];
    Variant v = natural ? Variant::NoParenNatural : Variant::NoParenFlipped;
    if (paren == 0) v = natural ? Variant::LeftParen : Variant::FlippedLeftParen;
    if (paren > 0) v = natural ? Variant::RightParen : Variant::FlippedRightParen;
    auto e = make_expression(numbers[0], numbers[1], numbers[2], additive, multiplicative, v, policy);
    if (!e) throw ExprError(ExprErrc::NonWholeResult, "expression is rejected by the filter");
    return *e;
}

std::optional<Expression> exchanged_prompt(const Expression& e, FilterPolicy policy) {
    if (!is_no_paren(e.variant)) return std::nullopt;
    const Variant other = e.variant == Variant::NoParenNatural ? Variant::NoParenFlipped : Variant::NoParenNatural;
    return make_expression(e.a, e.b, e.c, e.o1, e.o2, other, policy);
}

std::vector<Expression> enumerate_dataset(std::span<const int> operands, std::span<const OperatorPair> pairs,
                                          FilterPolicy policy) {
    if (operands.empty()) throw ExprError(ExprErrc::EmptyOperandRange, "operand range is empty");
    for (const auto& p : pairs) {
        if (precedence_level(p.first) == precedence_level(p.second)) {
            throw ExprError(ExprErrc::EqualPrecedencePair,
                            std::string("operator pair (") + symbol(p.first) + ", " + symbol(p.second) +
                                ") is not mixed-precedence");
        }
    }
    const auto n = static_cast<std::ptrdiff_t>(operands.size());
    std::vector<std::vector<Expression>> blocks(operands.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ia = 0; ia < n; ++ia) {
        auto& block = blocks[static_cast<std::size_t>(ia)];
        const int a = operands[static_cast<std::size_t>(ia)];
        for (int b : operands) {
            for (int c : operands) {
                for (const auto& p : pairs) {
                    for (Variant v : kAllVariants) {
                        if (auto e = make_expression(a, b, c, p.first, p.second, v, policy)) {
                            block.push_back(std::move(*e));
                        }
                    }
                }
            }
        }
    }
    std::vector<Expression> out;
    for (auto& block : blocks) {
        for (auto& e : block) out.push_back(std::move(e));
    }
    return out;
}

std::vector<Expression> enumerate_default_dataset(FilterPolicy policy) {
    static constexpr std::array<int, 9> kOperands{1, 2, 3, 4, 5, 6, 7, 8, 9};
    return enumerate_dataset(kOperands, kMixedPairs, policy);
}

// ---------------------------------------------------------------------------
// JSONL

std::string to_jsonl(const Expression& e) {
    nlohmann::ordered_json j;
    j["text"] = e.text;
    j["a"] = e.a;
    j["b"] = e.b;
    j["c"] = e.c;
    j["o1"] = std::string(1, symbol(e.o1));
    j["o2"] = std::string(1, symbol(e.o2));
    j["variant"] = variant_name(e.variant);
    j["intermediate"] = e.intermediate;
    j["final"] = e.final_value;
    if (e.swapped_final) {
        j["swapped_final"] = *e.swapped_final;
    } else {
        j["swapped_final"] = nullptr;
    }
    j["label1"] = e.labels[0].surface();
    j["label2"] = e.labels[1].surface();
    return j.dump();
}

Expression from_jsonl(std::string_view line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
        throw ExprError(ExprErrc::MalformedExpression, std::string("malformed dataset record: ") + ex.what());
    }
    try {
        Expression e;
        e.text = j.at("text").get<std::string>();
        e.a = j.at("a").get<int>();
        e.b = j.at("b").get<int>();
        e.c = j.at("c").get<int>();
        const auto o1 = j.at("o1").get<std::string>();
        const auto o2 = j.at("o2").get<std::string>();
        auto op1 = o1.size() == 1 ? op_from_symbol(o1[0]) : std::nullopt;
        auto op2 = o2.size() == 1 ? op_from_symbol(o2[0]) : std::nullopt;
        auto v = variant_from_name(j.at("variant").get<std::string>());
        if (!op1 || !op2 || !v) throw ExprError(ExprErrc::MalformedExpression, "bad operator or variant field");
        e.o1 = *op1;
        e.o2 = *op2;
        e.variant = *v;
        e.intermediate = j.at("intermediate").get<std::int64_t>();
        e.final_value = j.at("final").get<std::int64_t>();
        if (!j.at("swapped_final").is_null()) e.swapped_final = j.at("swapped_final").get<std::int64_t>();
        e.labels = operator_labels(e.text);
        if (e.labels[0].surface() != j.at("label1").get<std::string>() ||
            e.labels[1].surface() != j.at("label2").get<std::string>()) {
            throw ExprError(ExprErrc::MalformedExpression, "labels disagree with text: " + e.text);
        }
        return e;
    } catch (const nlohmann::json::exception& ex) {
        throw ExprError(ExprErrc::MalformedExpression, std::string("malformed dataset record: ") + ex.what());
    }
}

std::vector<Expression> read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset " + path);
    std::vector<Expression> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(from_jsonl(line));
        } catch (const ExprError& e) {
            throw ExprError(e.code(), path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_dataset(const std::string& path, std::span<const Expression> data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset " + path);
    for (const auto& e : data) out << to_jsonl(e) << '\n';
}

std::uint64_t dataset_hash(std::span<const Expression> data) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& e : data) {
        for (unsigned char ch : to_jsonl(e) + "\n") {
            h ^= ch;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace arithlens
