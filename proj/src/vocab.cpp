#include "arithlens/vocab.hpp"

#include <array>
#include <charconv>

namespace arithlens {

namespace vocab {

namespace {
const std::array<std::string, kSize>& table() {
    static const std::array<std::string, kSize> t = [] {
        std::array<std::string, kSize> out;
        for (int i = 0; i <= kMaxInteger; ++i) out[static_cast<std::size_t>(i)] = std::to_string(i);
        out[kPlus] = "+";
        out[kMinus] = "-";
        out[kTimes] = "*";
        out[kDivide] = "/";
        out[kLParen] = "(";
        out[kRParen] = ")";
        out[kEquals] = "=";
        out[kBos] = "<bos>";
        out[kPad] = "<pad>";
        return out;
    }();
    return t;
}
}  // namespace

std::string_view lexeme(int id) {
    if (id < 0 || id >= kSize) throw std::out_of_range("token id out of range: " + std::to_string(id));
    return table()[static_cast<std::size_t>(id)];
}

std::optional<int> lookup(std::string_view lex) {
    if (lex.empty()) return std::nullopt;
    if (lex[0] >= '0' && lex[0] <= '9') {
        int v = 0;
        auto [ptr, ec] = std::from_chars(lex.data(), lex.data() + lex.size(), v);
        if (ec != std::errc{} || ptr != lex.data() + lex.size()) return std::nullopt;
        // "007" is not canonical
        if (lex.size() > 1 && lex[0] == '0') return std::nullopt;
        return integer_token(v);
    }
    for (int id = kPlus; id < kSize; ++id) {
        if (table()[static_cast<std::size_t>(id)] == lex) return id;
    }
    return std::nullopt;
}

std::optional<int> integer_token(std::int64_t value) {
    if (value < 0 || value > kMaxInteger) return std::nullopt;
    return static_cast<int>(value);
}

}  // namespace vocab

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> out{vocab::kBos};
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] == ' ') {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ') ++j;
        const std::string_view lex = text.substr(i, j - i);
        const auto id = vocab::lookup(lex);
        if (!id || *id == vocab::kBos || *id == vocab::kPad) {
            throw UnknownLexeme("unknown lexeme '" + std::string(lex) + "'");
        }
        out.push_back(*id);
        i = j;
    }
    return out;
}

std::string detokenize(const std::vector<int>& tokens) {
    std::string out;
    for (int id : tokens) {
        if (id == vocab::kBos || id == vocab::kPad) continue;
        out += vocab::lexeme(id);
        out += ' ';
    }
    return out;
}

}  // namespace arithlens
