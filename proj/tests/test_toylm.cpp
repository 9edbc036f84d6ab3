#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "prunescope/toylm.hpp"

using namespace prunescope;

namespace {

ToyConfig small_config(std::uint64_t seed) {
  ToyConfig c;
  c.vocab_size = 24;
  c.model_dim = 8;
  c.num_layers = 3;
  c.ffn_dim = 32;
  c.max_context = 32;
  c.seed = seed;
  return c;
}

/// V=2, d=1, L=0 with E = [[1],[-1]], W = [[1],[-1]], zero positions.
ToyModel hand_model() {
  ToyConfig c;
  c.vocab_size = 2;
  c.model_dim = 1;
  c.num_layers = 0;
  c.ffn_dim = 1;
  c.max_context = 8;
  ToyModel m = init_model(c);
  m.embedding = Matrix(2, 1, {1.0, -1.0});
  m.lm_head = Matrix(2, 1, {1.0, -1.0});
  m.positional = Matrix(8, 1, 0.0);
  m.final_norm = {1.0};
  return m;
}

}  // namespace

TEST(InitModel, DeterministicInSeed) {
  const auto a = init_model(default_config(42));
  const auto b = init_model(default_config(42));
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == init_model(default_config(43)));
  EXPECT_EQ(a.blocks.size(), 8u);
  EXPECT_EQ(a.blocks[0].mlp.up.rows(), 128u);
  EXPECT_NO_THROW(a.validate());
}

TEST(InitModel, MinimalShapes) {
  ToyConfig c;
  c.vocab_size = 2;
  c.model_dim = 1;
  c.num_layers = 0;
  c.ffn_dim = 1;
  c.max_context = 3;
  const auto m = init_model(c);
  EXPECT_TRUE(m.blocks.empty());
  EXPECT_EQ(m.embedding.rows(), 2u);
  EXPECT_EQ(m.embedding.cols(), 1u);
  EXPECT_EQ(m.lm_head.rows(), 2u);
  EXPECT_EQ(m.final_norm.size(), 1u);
  EXPECT_EQ(m.positional.rows(), 3u);
}

TEST(InitModel, RejectsInvalidConfig) {
  ToyConfig c = small_config(1);
  c.vocab_size = 1;
  EXPECT_THROW(init_model(c), ValidationError);
  c = small_config(1);
  c.model_dim = 0;
  EXPECT_THROW(init_model(c), ValidationError);
  c = small_config(1);
  c.max_context = 0;
  EXPECT_THROW(init_model(c), ValidationError);
}

TEST(Forward, HandModel) {
  const auto m = hand_model();
  const std::vector<Token> tokens{0};
  const auto out = forward(m, tokens);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].hidden, (RealVector{1.0}));
  EXPECT_EQ(out[0].logits.scores(), (RealVector{1.0, -1.0}));
  EXPECT_EQ(argmax(out[0].logits.scores().values()), 0u);

  const auto gen = generate(m, tokens, 3);
  EXPECT_EQ(gen.state.tokens, (std::vector<Token>{0, 0, 0, 0}));
  EXPECT_EQ(gen.trace.size(), 3u);
}

TEST(Forward, ZeroLayerModelIsHeadOfNormedEmbedding) {
  ToyConfig c = small_config(3);
  c.num_layers = 0;
  const auto m = init_model(c);
  const std::vector<Token> tokens{4, 0, 23, 9};
  const auto out = forward(m, tokens);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::vector<double> h(c.model_dim);
    for (std::size_t k = 0; k < h.size(); ++k) h[k] = m.embedding(tokens[i], k) + m.positional(i, k);
    const auto normed = kernels::rms_norm(h, m.final_norm);
    EXPECT_EQ(out[i].logits.scores().vec(), m.lm_head.apply(normed));
  }
}

TEST(Forward, MatchesStraightLineOracle) {
  const auto m = init_model(small_config(17));
  const std::vector<Token> tokens{1, 5, 9, 2, 2, 20, 7};
  const auto out = forward(m, tokens);
  const auto ref = oracle::forward(m, tokens);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t v = 0; v < m.config.vocab_size; ++v)
      EXPECT_NEAR(out[i].logits.scores()[v], ref.logits[i][v], 1e-12);
}

TEST(Forward, Causality) {
  const auto m = init_model(small_config(5));
  std::vector<Token> a{3, 1, 4, 1, 5, 9, 2, 6};
  std::vector<Token> b = a;
  std::reverse(b.begin() + 4, b.end());
  b[7] = 23;
  const auto oa = forward(m, a, Capture::all_layers);
  const auto ob = forward(m, b, Capture::all_layers);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(oa[i].logits.scores(), ob[i].logits.scores());
    EXPECT_EQ(oa[i].per_layer_hidden, ob[i].per_layer_hidden);
  }
  EXPECT_NE(oa[7].logits.scores(), ob[7].logits.scores());
}

TEST(Forward, ZeroedOutputProjectionsMakeBlockIdentity) {
  auto m = init_model(small_config(6));
  std::fill(m.blocks[1].attn.output.flat().begin(), m.blocks[1].attn.output.flat().end(), 0.0);
  std::fill(m.blocks[1].mlp.down.flat().begin(), m.blocks[1].mlp.down.flat().end(), 0.0);
  const std::vector<Token> tokens{2, 7, 1, 8};
  const auto out = forward(m, tokens, Capture::all_layers);
  for (const auto& s : out) {
    ASSERT_EQ(s.per_layer_hidden.size(), 4u);
    EXPECT_EQ(s.per_layer_hidden[1], s.per_layer_hidden[2]);
    EXPECT_NE(s.per_layer_hidden[0], s.per_layer_hidden[1]);
  }
}

TEST(Forward, Errors) {
  const auto m = init_model(small_config(1));
  EXPECT_THROW(forward(m, std::vector<Token>{}), ValidationError);
  EXPECT_THROW(forward(m, std::vector<Token>{1, 24}), IndexError);
  EXPECT_THROW(forward(m, std::vector<Token>(33, 1)), CapacityError);
}

TEST(ForwardStep, KvCacheMatchesFullForward) {
  const auto m = init_model(small_config(8));
  const std::vector<Token> tokens{0, 3, 3, 17, 22, 1, 9, 14, 5, 5};
  const auto full = forward(m, tokens, Capture::all_layers);
  DecodeState state;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto s = forward_step(m, state, tokens[i], Capture::all_layers);
    for (std::size_t v = 0; v < m.config.vocab_size; ++v)
      EXPECT_NEAR(s.logits.scores()[v], full[i].logits.scores()[v], 1e-10);
    for (std::size_t l = 0; l < s.per_layer_hidden.size(); ++l)
      for (std::size_t k = 0; k < m.config.model_dim; ++k)
        EXPECT_NEAR(s.per_layer_hidden[l][k], full[i].per_layer_hidden[l][k], 1e-10);
  }
  EXPECT_EQ(state.keys.size(), 3u);
  EXPECT_EQ(state.keys[0].size(), tokens.size());
}

TEST(Generate, GreedyAndSampledDeterminism) {
  const auto m = init_model(default_config(42));
  const std::vector<Token> prompt{3, 17, 5};
  EXPECT_EQ(generate(m, prompt, 12).state.tokens, generate(m, prompt, 12).state.tokens);
  const auto s1 = generate(m, prompt, 12, DecodeSpec::sample(1.0, 99));
  const auto s2 = generate(m, prompt, 12, DecodeSpec::sample(1.0, 99));
  EXPECT_EQ(s1.state.tokens, s2.state.tokens);
  bool any_differs = false;
  for (std::uint64_t seed = 100; seed < 110 && !any_differs; ++seed)
    any_differs = generate(m, prompt, 12, DecodeSpec::sample(1.0, seed)).state.tokens != s1.state.tokens;
  EXPECT_TRUE(any_differs);
  EXPECT_EQ(s1.state.prompt_len, 3u);
  EXPECT_EQ(s1.state.step, 12u);
  EXPECT_EQ(s1.state.tokens.size(), 15u);
}

TEST(Generate, TraceMatchesFullForwardOfEmittedSequence) {
  const auto m = init_model(small_config(10));
  const std::vector<Token> prompt{1, 2};
  const auto g = generate(m, prompt, 6);
  const auto full = forward(m, g.state.tokens);
  for (std::size_t t = 0; t < 6; ++t) {
    const auto& ref = full[prompt.size() - 1 + t];
    for (std::size_t v = 0; v < m.config.vocab_size; ++v)
      EXPECT_NEAR(g.trace[t].logits.scores()[v], ref.logits.scores()[v], 1e-10);
    EXPECT_EQ(g.state.tokens[prompt.size() + t], argmax(g.trace[t].logits.scores().values()));
  }
}

TEST(Generate, Errors) {
  const auto m = init_model(small_config(1));
  EXPECT_THROW(generate(m, std::vector<Token>{1}, 32), CapacityError);
  EXPECT_THROW(generate(m, std::vector<Token>{99}, 2), IndexError);
  EXPECT_THROW(generate(m, std::vector<Token>{}, 2), ValidationError);
  EXPECT_THROW(generate(m, std::vector<Token>{1}, 0), ValidationError);
}

TEST(ModelFile, RoundTripIsBitwise) {
  const auto m = init_model(small_config(33));
  std::stringstream buf;
  write_model(buf, m);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 6), "TOYLM1");
  // vocab_size as little-endian u64 right after the magic
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 24);
  EXPECT_EQ(bytes[7], 0);
  const std::size_t params = 24 * 8 + 3 * (8 + 4 * 64 + 8 + 2 * 256) + 8 + 24 * 8 + 32 * 8;
  EXPECT_EQ(bytes.size(), 6 + 6 * 8 + params * 8);
  const auto back = read_model(buf);
  EXPECT_TRUE(back == m);

  std::filesystem::create_directories(PRUNESCOPE_TEST_TMP);
  const std::string path = std::string(PRUNESCOPE_TEST_TMP) + "/model.toylm";
  save_model(path, m);
  EXPECT_TRUE(load_model(path) == m);
}

TEST(ModelFile, RejectsCorruptInput) {
  std::stringstream bad("TOYLM2xxxxxxxx");
  EXPECT_THROW(read_model(bad), ParseError);
  std::stringstream buf;
  write_model(buf, init_model(small_config(2)));
  std::string bytes = buf.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_model(truncated), ParseError);
  std::stringstream trailing(bytes + "x");
  EXPECT_THROW(read_model(trailing), ParseError);
  EXPECT_THROW(load_model("/nonexistent/dir/model.bin"), IoError);
}
