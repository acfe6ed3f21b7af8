// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "dpatd/checkpoint.hpp"

using namespace dpatd;
namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dpatd_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Minimal PCM header with the given channel count, followed by raw frames.
std::string pcm_file(std::uint16_t channels, const std::vector<std::int16_t>& samples, std::uint16_t bits = 16,
                     std::uint16_t format = 1) {
  std::string out = "RIFF";
  detail::put_u32le(out, static_cast<std::uint32_t>(36 + 2 * samples.size()));
  out += "WAVEfmt ";
  detail::put_u32le(out, 16);
  detail::put_u16le(out, format);
  detail::put_u16le(out, channels);
  detail::put_u32le(out, 8000);
  detail::put_u32le(out, 8000u * 2 * channels);
  detail::put_u16le(out, static_cast<std::uint16_t>(2 * channels));
  detail::put_u16le(out, bits);
  out += "data";
  detail::put_u32le(out, static_cast<std::uint32_t>(2 * samples.size()));
  for (auto s : samples) detail::put_u16le(out, static_cast<std::uint16_t>(s));
  return out;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.n_blocks = 1;
  c.chunk = 6;
  c.encoder_kernel = 3;
  c.max_positions = 12;
  return c;
}

}  // namespace

// --- WAV -------------------------------------------------------------------------

TEST(Wav, RoundTripWithinOneStep) {
  Rng rng(1);
  AudioClip clip;
  for (int i = 0; i < 1000; ++i) clip.samples.push_back(rng.uniform(-1.0, 1.0));
  AudioClip back = parse_wav(bytes_of(encode_wav(clip)));
  ASSERT_EQ(back.samples.size(), clip.samples.size());
  EXPECT_EQ(back.sample_rate, 16000u);
  for (std::size_t i = 0; i < clip.samples.size(); ++i) {
    EXPECT_LE(std::abs(back.samples[i] - clip.samples[i]), 1.0 / 32768.0);
  }
}

TEST(Wav, SampleScaling) {
  AudioClip c = parse_wav(bytes_of(pcm_file(1, {16384, -32768, 0, 32767})));
  EXPECT_EQ(c.samples, (std::vector<double>{0.5, -1.0, 0.0, 32767.0 / 32768.0}));
  EXPECT_EQ(c.sample_rate, 8000u);
}

TEST(Wav, HeaderLayout) {
  AudioClip clip{{0.0, 0.5, -0.5}, 22050};
  const std::string b = encode_wav(clip);
  ASSERT_EQ(b.size(), 44u + 6u);
  EXPECT_EQ(b.substr(0, 4), "RIFF");
  EXPECT_EQ(detail::read_u32le(reinterpret_cast<const unsigned char*>(b.data()) + 4), 36u + 6u);
  EXPECT_EQ(b.substr(8, 8), "WAVEfmt ");
  EXPECT_EQ(detail::read_u32le(reinterpret_cast<const unsigned char*>(b.data()) + 24), 22050u);
  EXPECT_EQ(b.substr(36, 4), "data");
  EXPECT_EQ(detail::read_u32le(reinterpret_cast<const unsigned char*>(b.data()) + 40), 6u);
}

TEST(Wav, ClampsOutOfRange) {
  AudioClip back = parse_wav(bytes_of(encode_wav({{2.0, -3.0}, 16000})));
  EXPECT_EQ(back.samples[0], 32767.0 / 32768.0);
  EXPECT_EQ(back.samples[1], -1.0);
  EXPECT_THROW(encode_wav({{std::numeric_limits<double>::quiet_NaN()}, 16000}), InputError);
  EXPECT_THROW(encode_wav({{}, 16000}), InputError);
}

TEST(Wav, SilenceStaysSilent) {
  AudioClip back = parse_wav(bytes_of(encode_wav({std::vector<double>(50, 0.0), 16000})));
  for (double v : back.samples) EXPECT_EQ(v, 0.0);
}

TEST(Wav, StereoRejectedOrDownmixed) {
  const auto bytes = bytes_of(pcm_file(2, {16384, 0, -16384, -16384}));
  EXPECT_THROW(parse_wav(bytes), ParseError);
  AudioClip mono = parse_wav(bytes, StereoMode::downmix);
  EXPECT_EQ(mono.samples, (std::vector<double>{0.25, -0.5}));
}

TEST(Wav, MalformedFiles) {
  const std::string good = pcm_file(1, {1, 2, 3, 4});
  EXPECT_THROW(parse_wav(bytes_of(good.substr(0, good.size() - 3))), ParseError);
  EXPECT_THROW(parse_wav(bytes_of(good.substr(0, 20))), ParseError);
  EXPECT_THROW(parse_wav(bytes_of("RIFX" + good.substr(4))), ParseError);
  EXPECT_THROW(parse_wav(bytes_of(pcm_file(1, {1, 2}, 8))), ParseError);
  EXPECT_THROW(parse_wav(bytes_of(pcm_file(1, {1, 2}, 16, 3))), ParseError);
  EXPECT_THROW(parse_wav(bytes_of(pcm_file(3, {1, 2, 3}))), ParseError);
  EXPECT_THROW(parse_wav(bytes_of(pcm_file(1, {}))), ParseError);
  try {
    parse_wav(bytes_of("RIFX" + good.substr(4)));
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("at byte 0"), std::string::npos);
  }
}

TEST(Wav, FileRoundTrip) {
  fs::path dir = temp_dir("wav");
  AudioClip clip{{0.25, -0.125}, 16000};
  write_wav(clip, dir / "a.wav");
  EXPECT_EQ(read_wav(dir / "a.wav").samples, clip.samples);
  EXPECT_THROW(read_wav(dir / "missing.wav"), Error);
  fs::remove_all(dir);
}

// --- config ----------------------------------------------------------------------

TEST(Config, ParsesAndRoundTrips) {
  RunConfig rc = RunConfig::parse(
      "# desk run\n"
      "model.d = 16\n"
      "model.heads=2   # trailing comment\n"
      "model.activation = relu\n"
      "train.max_lr = 1e-3\n"
      "data.clean_kind = chirp\n"
      "data.snr_db = inf\n"
      "\n");
  EXPECT_EQ(rc.model.d, 16u);
  EXPECT_EQ(rc.model.heads, 2u);
  EXPECT_EQ(rc.model.activation, Activation::relu);
  EXPECT_EQ(rc.train.max_lr, 1e-3);
  EXPECT_EQ(rc.data.clean_kind, CleanKind::chirp);
  EXPECT_TRUE(std::isinf(rc.data.snr_db));
  RunConfig back = RunConfig::parse(rc.serialize());
  EXPECT_TRUE(back == rc);
  EXPECT_EQ(back.train.max_lr, 1e-3);
}

TEST(Config, DefaultsRoundTripExactly) {
  RunConfig rc;
  rc.train.max_lr = 0.1 + 0.2;
  RunConfig back = RunConfig::parse(rc.serialize());
  EXPECT_EQ(back.train.max_lr, rc.train.max_lr);
  EXPECT_TRUE(back == rc);
}

TEST(Config, Errors) {
  EXPECT_THROW(RunConfig::parse("model.d 16\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("= 3\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("model.d = 1\nmodel.d = 2\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("model.width = 1\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("model.d = -1\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("model.d = 4x\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("model.activation = swish\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("train.max_lr = fast\n"), ParseError);
}

TEST(Config, ModelViewRoundTrip) {
  ModelConfig m = ModelConfig::full_size();
  m.seed = 99;
  m.norm_groups = 4;
  const std::string text = serialize_model_config(m);
  EXPECT_EQ(text.find("train."), std::string::npos);
  EXPECT_EQ(serialize_model_config(parse_model_config(text)), text);
}

// --- checkpoints -----------------------------------------------------------------

TEST(Checkpoint, BitExactRoundTrip) {
  const ModelConfig c = tiny_model();
  ModelWeights w = init_weights(c, 3);
  w.output_bias.mutable_data()[0] = -0.0;
  w.expand_bias.mutable_data()[1] = std::numeric_limits<double>::denorm_min();
  const std::string bytes = encode_checkpoint(c, w);
  Checkpoint ck = decode_checkpoint(bytes_of(bytes));
  EXPECT_EQ(serialize_model_config(ck.config), serialize_model_config(c));
  EXPECT_FALSE(ck.optimizer.has_value());
  ModelWeights into = init_weights(c, 4);
  load_weights(ck, c, into);
  auto a = w.parameters(), b = into.parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].second.numel(); ++j)
      ASSERT_EQ(std::bit_cast<std::uint64_t>(a[i].second.at(j)), std::bit_cast<std::uint64_t>(b[i].second.at(j)));
  EXPECT_EQ(encode_checkpoint(c, into), bytes);
}

TEST(Checkpoint, OptimizerStateRoundTrip) {
  const ModelConfig c = tiny_model();
  ModelWeights w = init_weights(c, 3);
  AdamState st;
  for (const auto& [n, t] : w.parameters()) {
    st.m.emplace_back(t.numel(), 0.125);
    st.v.emplace_back(t.numel(), 0.5);
  }
  st.t = 77;
  Checkpoint ck = decode_checkpoint(bytes_of(encode_checkpoint(c, w, &st)));
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->t, 77u);
  EXPECT_EQ(ck.optimizer->m, st.m);
  EXPECT_EQ(ck.optimizer->v, st.v);
}

TEST(Checkpoint, FileRoundTripAndLoadModel) {
  fs::path dir = temp_dir("ckpt");
  const ModelConfig c = tiny_model();
  ModelWeights w = init_weights(c, 5);
  save_checkpoint(dir / "m.dptd", c, w);
  LoadedModel m = load_model(dir / "m.dptd");
  EXPECT_EQ(m.weights.encoder_kernel.at(2), w.encoder_kernel.at(2));
  EXPECT_EQ(m.config.d, 8u);
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptHeaders) {
  const ModelConfig c = tiny_model();
  std::string bytes = encode_checkpoint(c, init_weights(c, 1));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes_of(bad_magic)), ParseError);
  std::string bad_version = bytes;
  bad_version[4] = 2;
  try {
    decode_checkpoint(bytes_of(bad_version));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
  EXPECT_THROW(decode_checkpoint(bytes_of(bytes.substr(0, bytes.size() - 9))), ParseError);
  EXPECT_THROW(decode_checkpoint(bytes_of(bytes + "x")), ParseError);
}

TEST(Checkpoint, IncompatibleConfigRejected) {
  const ModelConfig desk = ModelConfig::desk();
  Checkpoint ck = decode_checkpoint(bytes_of(encode_checkpoint(desk, init_weights(desk, 1))));
  EXPECT_NO_THROW(check_compatible(ck, desk));
  EXPECT_THROW(check_compatible(ck, ModelConfig::full_size()), DimensionError);
  ModelConfig wider = desk;
  wider.max_positions = 4096;
  EXPECT_THROW(check_compatible(ck, wider), DimensionError);
}
