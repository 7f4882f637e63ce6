#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace arithlens {

/// Token ids. One token per integer 0..162, then operators, parentheses,
/// "=", BOS and PAD.
namespace vocab {

inline constexpr int kMaxInteger = 162;  // (9 + 9) * 9
inline constexpr int kPlus = kMaxInteger + 1;
inline constexpr int kMinus = kPlus + 1;
inline constexpr int kTimes = kPlus + 2;
inline constexpr int kDivide = kPlus + 3;
inline constexpr int kLParen = kPlus + 4;
inline constexpr int kRParen = kPlus + 5;
inline constexpr int kEquals = kPlus + 6;
inline constexpr int kBos = kPlus + 7;
inline constexpr int kPad = kPlus + 8;
inline constexpr int kSize = kPad + 1;

std::string_view lexeme(int id);
std::optional<int> lookup(std::string_view lexeme);
/// Token id of an integer value; empty when outside 0..162.
std::optional<int> integer_token(std::int64_t value);

}  // namespace vocab

class UnknownLexeme : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// BOS-prefixed token ids for whitespace-separated text.
std::vector<int> tokenize(std::string_view text);
/// Inverse of tokenize on canonical text (BOS dropped, trailing space kept).
std::string detokenize(const std::vector<int>& tokens);

}  // namespace arithlens
