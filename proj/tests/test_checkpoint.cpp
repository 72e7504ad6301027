#include <doctest.h>

#include <filesystem>

#include "sharelora/audit.hpp"
#include "sharelora/checkpoint.hpp"
#include "sharelora/errors.hpp"
#include "test_util.hpp"

using namespace sharelora;
using testutil::bit_equal;

namespace {

TinyTransformer trained_like(const std::string& scheme) {
  const ModelSpec tiny = preset_spec("tiny");
  TinyTransformer m(tiny, AdapterScheme::named(scheme, 4, 8, all_targets(tiny)), 1001, 2001);
  randomize_adapter_b(m, 9);
  return m;
}

TokenBatch tokens() {
  TokenBatch t{2, 5, {}};
  for (int i = 0; i < 10; ++i) t.ids.push_back((i * 7) % 60);
  return t;
}

}  // namespace

TEST_CASE("round trip restores identical logits for every scheme") {
  for (const char* scheme : {"lora", "lora_fa", "sharea", "shareb", "shareab", "sharea_qkv"}) {
    CAPTURE(scheme);
    const TinyTransformer m = trained_like(scheme);
    const std::string bytes = encode_checkpoint(make_checkpoint(m, 1001, 2001));
    const TinyTransformer back = restore_model(decode_checkpoint(bytes));
    CHECK(back.scheme().label() == scheme);
    CHECK(bit_equal(back.logits(tokens()).data(), m.logits(tokens()).data()));
    CHECK(encode_checkpoint(make_checkpoint(back, 1001, 2001)) == bytes);
  }
}

TEST_CASE("full fine-tune checkpoints carry the whole base") {
  const ModelSpec tiny = preset_spec("tiny");
  TinyTransformer m(tiny, AdapterScheme::named("fullft", 4, 8, all_targets(tiny)), 1001, 2001);
  m.base_parameters()[0].tensor.mutable_data()[0] += 1.0;
  const TinyTransformer back = restore_model(decode_checkpoint(encode_checkpoint(make_checkpoint(m, 1001, 2001))));
  CHECK(bit_equal(back.logits(tokens()).data(), m.logits(tokens()).data()));
}

TEST_CASE("shared matrices are stored once") {
  const TinyTransformer m = trained_like("shareab");
  const Checkpoint c = make_checkpoint(m, 1001, 2001);
  CHECK(c.tensors.size() == 14);
  const TinyTransformer fa = trained_like("lora_fa");
  // 14 trainable B plus 14 frozen A
  CHECK(make_checkpoint(fa, 1001, 2001).tensors.size() == 28);
}

TEST_CASE("file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "sharelora_test_ckpt.bin";
  const TinyTransformer m = trained_like("sharea");
  write_checkpoint(path, make_checkpoint(m, 1001, 2001));
  const TinyTransformer back = restore_model(read_checkpoint(path));
  CHECK(bit_equal(back.logits(tokens()).data(), m.logits(tokens()).data()));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_checkpoint(path), CheckpointError);
}

TEST_CASE("corruption is detected") {
  const std::string good = encode_checkpoint(make_checkpoint(trained_like("sharea"), 1001, 2001));
  SUBCASE("bit flip anywhere in the body") {
    for (std::size_t pos : {std::size_t{10}, good.size() / 2, good.size() - 20}) {
      std::string bad = good;
      bad[pos] = static_cast<char>(bad[pos] ^ 0x10);
      CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
    }
  }
  SUBCASE("truncation") {
    for (std::size_t keep : {std::size_t{0}, std::size_t{5}, std::size_t{40}, good.size() - 1}) {
      CHECK_THROWS_AS(decode_checkpoint(good.substr(0, keep)), CheckpointError);
    }
  }
  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  }
  SUBCASE("header that does not describe the tensors") {
    Checkpoint c = decode_checkpoint(good);
    c.header["spec_hash"] = "12345";
    CHECK_THROWS_AS(restore_model(c), CheckpointError);
    Checkpoint d = decode_checkpoint(good);
    d.tensors.pop_back();
    CHECK_THROWS_AS(restore_model(d), CheckpointError);
    Checkpoint e = decode_checkpoint(good);
    e.tensors[0].second = Tensor::zeros({1, 1});
    CHECK_THROWS_AS(restore_model(e), CheckpointError);
    Checkpoint f = decode_checkpoint(good);
    f.header.erase("scheme");
    CHECK_THROWS_AS(restore_model(f), CheckpointError);
  }
}
