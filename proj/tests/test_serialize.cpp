#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "evoprompt/serialize.hpp"
#include "evoprompt/trainer.hpp"

using namespace evoprompt;

TEST(Snapshot, ByteLayoutOfOneEntry) {
  Snapshot snap;
  snap.sections.push_back({"TEST", {{"x", Tensor::scalar(1.0)}}});
  const std::string b = encode_snapshot(snap);
  // 12 header + 4 tag + 8 length + payload (4 + 4+1 + 4 + 8+8 + 8 = 37) + 8 checksum
  ASSERT_EQ(b.size(), 12u + 4 + 8 + 37 + 8);
  EXPECT_EQ(b.substr(0, 4), "EVPB");
  EXPECT_EQ(b[4], 1);  // version, little-endian
  EXPECT_EQ(b[8], 1);  // one section
  EXPECT_EQ(b.substr(12, 4), "TEST");
  EXPECT_EQ(static_cast<unsigned char>(b[16]), 37u);
  EXPECT_EQ(b[24], 1);  // one entry
  EXPECT_EQ(b[28], 1);  // name length
  EXPECT_EQ(b[32], 'x');
  EXPECT_EQ(b[33], 2);  // ndim
  EXPECT_EQ(b[37], 1);  // rows
  EXPECT_EQ(b[45], 1);  // cols
  // 1.0 = 0x3FF0000000000000, least significant byte first.
  for (int k = 0; k < 6; ++k) EXPECT_EQ(b[53 + k], 0);
  EXPECT_EQ(static_cast<unsigned char>(b[59]), 0xF0u);
  EXPECT_EQ(static_cast<unsigned char>(b[60]), 0x3Fu);
}

TEST(Snapshot, RoundTripIsExact) {
  std::mt19937_64 rng(4);
  Snapshot snap;
  snap.sections.push_back({"AAAA", {{"a", Tensor::gaussian({3, 5}, 1.0, rng)}, {"b", Tensor::scalar(-0.0)}}});
  snap.sections.push_back({"BBBB", {}});
  Snapshot back = decode_snapshot(encode_snapshot(snap));
  ASSERT_EQ(back.sections.size(), 2u);
  EXPECT_EQ(back.sections[0].tag, "AAAA");
  EXPECT_EQ(*back.sections[0].find("a"), snap.sections[0].entries[0].value);
  EXPECT_TRUE(std::signbit(back.sections[0].find("b")->item()));
  EXPECT_TRUE(back.sections[1].entries.empty());
  EXPECT_EQ(encode_snapshot(back), encode_snapshot(snap));
}

TEST(Snapshot, CorruptionIsRejected) {
  Snapshot snap;
  snap.sections.push_back({"TEST", {{"x", Tensor::from_rows({{1, 2}, {3, 4}})}}});
  const std::string good = encode_snapshot(snap);

  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_snapshot(bad), InputError);
  bad = good;
  bad[4] = 9;
  EXPECT_THROW(decode_snapshot(bad), InputError);
  bad = good;
  bad[good.size() - 20] ^= 0x01;  // a data byte
  EXPECT_THROW(decode_snapshot(bad), InputError);
  EXPECT_THROW(decode_snapshot(good.substr(0, good.size() - 3)), InputError);
  EXPECT_THROW(decode_snapshot(good + "z"), InputError);
  EXPECT_THROW(decode_snapshot(""), InputError);
}

TEST(Snapshot, EncoderRoundTrip) {
  EncoderConfig cfg;
  FrozenEncoder a(cfg);
  cfg.seed = 99;
  FrozenEncoder b(cfg);
  ASSERT_NE(a.checksum(), b.checksum());
  Snapshot snap;
  snap.sections.push_back(encoder_section(a));
  load_encoder(decode_snapshot(encode_snapshot(snap)), b);
  EXPECT_EQ(a.checksum(), b.checksum());

  EncoderConfig other;
  other.vision_width = 16;
  FrozenEncoder c(other);
  EXPECT_THROW(load_encoder(snap, c), InputError);
  EXPECT_THROW(load_encoder(Snapshot{}, b), InputError);
}

TEST(Snapshot, TrainedProjectorRoundTrip) {
  TrainConfig cfg = tiny_config();
  auto world = std::make_shared<const World>(build_world(cfg));
  Trainer tr(cfg, world);
  tr.run();
  const std::string path = (std::filesystem::temp_directory_path() / "evoprompt_test_snapshot.evpb").string();
  write_snapshot(path, make_snapshot(tr.encoder(), tr.projector()));
  Snapshot snap = read_snapshot(path);
  std::remove(path.c_str());

  PromptProjector fresh(tr.config().mpp, tr.config().variant.layout(), tr.config().schedule, 12345);
  load_projector(snap, fresh);
  EXPECT_TRUE(fresh.history_intact());
  EXPECT_EQ(fresh.trainable_count(), tr.projector().trainable_count());
  const auto want = tr.projector().named_state(), got = fresh.named_state();
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t k = 0; k < want.size(); ++k) {
    EXPECT_EQ(want[k].first, got[k].first);
    EXPECT_EQ(*want[k].second, *got[k].second);
  }
  const auto wh = tr.projector().named_history(), gh = fresh.named_history();
  ASSERT_EQ(wh.size(), gh.size());
  for (std::size_t k = 0; k < wh.size(); ++k) EXPECT_EQ(*wh[k].second, *gh[k].second);

  Tape t1, t2;
  PromptSet p1 = tr.projector().prompts(t1), p2 = fresh.prompts(t2);
  for (Modality m : kModalities)
    for (const auto& [layer, v] : p1.layers(m)) EXPECT_EQ(v.value(), p2.find(layer, m)->value());
}

TEST(Snapshot, ProjectorLayoutMismatchIsRejected) {
  TrainConfig cfg = tiny_config();
  PromptProjector full(cfg.mpp, Variant{}.layout(), cfg.schedule, 1);
  PromptProjector free(cfg.mpp, Variant::parse("no_mpp").layout(), cfg.schedule, 1);
  Snapshot snap = make_snapshot(FrozenEncoder(cfg.encoder), full);
  EXPECT_THROW(load_projector(snap, free), InputError);
  Snapshot snap2 = make_snapshot(FrozenEncoder(cfg.encoder), free);
  EXPECT_THROW(load_projector(snap2, full), InputError);
}
