#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "arithlens/checkpoint.hpp"
#include "reference.hpp"

using namespace arithlens;

namespace {

CheckpointErrc error_of(const std::string& bytes) {
    try {
        deserialize_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        return e.code();
    }
    FAIL("no error raised");
    return CheckpointErrc::Io;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("round trip is bit-exact") {
    auto m = ModelBundle::initialized(reference::small_config(21));
    m.meta.dataset_hash = 0xfeedULL;
    m.meta.steps = 42;
    m.meta.heldout_accuracy = 0.875;
    const auto bytes = serialize_checkpoint(m);
    const auto back = deserialize_checkpoint(bytes);
    CHECK(back == m);
    CHECK(back.meta.dataset_hash == 0xfeedULL);
    CHECK(back.meta.steps == 42);
    CHECK(back.meta.heldout_accuracy == 0.875);
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK(forward(back, tokenize("1 + 2 * 3 = ")).logits == forward(m, tokenize("1 + 2 * 3 = ")).logits);
}

TEST_CASE("file round trip") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto path = (std::filesystem::temp_directory_path() / "arithlens_ckpt_test.bin").string();
    save_checkpoint(m, path);
    CHECK(load_checkpoint(path) == m);
    std::filesystem::remove(path);
    try {
        load_checkpoint(path);
        FAIL("missing file accepted");
    } catch (const CheckpointError& e) {
        CHECK(e.code() == CheckpointErrc::Io);
    }
}

TEST_CASE("damaged bytes are rejected") {
    const auto bytes = serialize_checkpoint(ModelBundle::initialized(reference::small_config()));
    CHECK(error_of(bytes.substr(0, bytes.size() / 2)) == CheckpointErrc::CorruptCheckpoint);
    CHECK(error_of(bytes.substr(0, 3)) == CheckpointErrc::CorruptCheckpoint);
    CHECK(error_of("") == CheckpointErrc::CorruptCheckpoint);
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x01;
    CHECK(error_of(flipped) == CheckpointErrc::CorruptCheckpoint);
    auto magic = bytes;
    magic[0] = 'X';
    CHECK(error_of(magic) == CheckpointErrc::CorruptCheckpoint);
}

TEST_CASE("a different format version is reported as such") {
    auto bytes = serialize_checkpoint(ModelBundle::initialized(reference::small_config()));
    bytes[4] = static_cast<char>(kCheckpointVersion + 1);
    CHECK(error_of(bytes) == CheckpointErrc::VersionMismatch);
}

}
