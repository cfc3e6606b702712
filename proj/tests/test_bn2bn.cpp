#include <gtest/gtest.h>

#include <cmath>

#include "voiceshop/bn2bn.hpp"
#include "voiceshop/errors.hpp"
#include "voiceshop/optim.hpp"

using namespace vs;
using namespace vs::bn2bn;
using vs::num::Tensor;

namespace {

Bn2BnConfig small_config(std::vector<std::string> accents = {"a", "b"}) {
  Bn2BnConfig c;
  c.accents = std::move(accents);
  return c;
}

Matrix random_sequence(std::size_t rows, std::size_t cols, num::Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

void fill(Tensor t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

}  // namespace

TEST(Prior, BetaBinomialMatchesReference) {
  // Reference pmf for n=10, alpha=0.1, beta=0.9 from an independent implementation.
  const double ref[] = {0.7400229, 0.07474979, 0.04157432, 0.0294704, 0.02317057, 0.0193219,
                        0.01675879, 0.01497855, 0.01375186, 0.01302808, 0.01317284};
  auto p = beta_binomial_prior(10, 0.1, 0.9);
  ASSERT_EQ(p.size(), 11u);
  double total = 0;
  for (std::size_t k = 0; k < 11; ++k) {
    EXPECT_NEAR(p[k], ref[k], 1e-7);
    total += p[k];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Encoder, PreservesLengthAndIsPerItem) {
  num::Rng rng(1);
  Bn2BnModel m(small_config(), rng);
  for (std::size_t T : {7, 32, 101}) {
    Tensor z = m.encode(to_tensor(random_sequence(8, T, rng)));
    EXPECT_EQ(z.rows(), 32u);
    EXPECT_EQ(z.cols(), T);
  }
  Matrix a = random_sequence(8, 12, rng), b = random_sequence(8, 20, rng);
  Tensor za1 = m.encode(to_tensor(a));
  m.encode(to_tensor(b));
  Tensor za2 = m.encode(to_tensor(a));
  for (std::size_t i = 0; i < za1.numel(); ++i) EXPECT_EQ(za1.at(i), za2.at(i));
  EXPECT_THROW(m.encode(Tensor::zeros({8, 0})), ContractError);
  EXPECT_THROW(m.encode(Tensor::zeros({5, 4})), ContractError);
}

TEST(Attention, PriorOnlyStepFollowsBetaBinomial) {
  num::Rng rng(2);
  DcaConfig cfg;
  DynamicConvAttention att(16, cfg, rng);
  fill(att.energy, 0.0);  // energies reduce to the log prior term
  Tensor memory = Tensor::randn({4, 30}, rng);
  Attention a = att(Tensor::randn({16, 1}, rng), initial_alignment(30), memory);
  auto pmf = beta_binomial_prior(10, 0.1, 0.9);
  double norm = 1.0 + 30 * 1e-6;
  for (std::size_t k = 0; k < 30; ++k) {
    double expected = ((k <= 10 ? pmf[k] : 0.0) + 1e-6) / norm;
    EXPECT_NEAR(a.weights.at(k), expected, 1e-9);
  }
  std::size_t mode = 0;
  for (std::size_t k = 1; k < 30; ++k)
    if (a.weights.at(k) > a.weights.at(mode)) mode = k;
  EXPECT_EQ(mode, 0u);
}

TEST(Attention, WeightsAreADistribution) {
  num::Rng rng(3);
  DynamicConvAttention att(16, DcaConfig{}, rng);
  Tensor memory = Tensor::randn({4, 25}, rng);
  Tensor prev = initial_alignment(25);
  for (int step = 0; step < 20; ++step) {
    Attention a = att(Tensor::randn({16, 1}, rng, 3.0), prev, memory);
    double total = 0;
    for (double w : a.weights.values()) {
      EXPECT_GE(w, 0.0);
      total += w;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_EQ(a.context.rows(), 4u);
    prev = a.weights;
  }
}

TEST(Decoder, GateHaltingContract) {
  num::Rng rng(4);
  Bn2BnModel m(small_config(), rng);
  Tensor z = m.encode(to_tensor(random_sequence(8, 10, rng)));
  auto& d = m.decoder(0);
  fill(d.gate_proj.weight, 0.0);
  fill(d.gate_proj.bias, 50.0);
  num::NoGradGuard guard;
  auto one = m.decode(0, z, 20);
  EXPECT_EQ(one.pre.cols(), 1u);
  EXPECT_FALSE(one.truncated);
  fill(d.gate_proj.bias, -50.0);
  auto full = m.decode(0, z, 20);
  EXPECT_EQ(full.pre.cols(), 20u);
  EXPECT_TRUE(full.truncated);
  EXPECT_EQ(full.alignment.rows(), 20);
  EXPECT_THROW(m.decode(5, z, 3), LookupError);
  EXPECT_THROW(m.convert(random_sequence(8, 5, rng), "zz"), LookupError);
}

TEST(PostNet, ZeroInitIsIdentityAndL18KeepsLength) {
  num::Rng rng(5);
  Bn2BnModel m(small_config(), rng);
  Tensor x = Tensor::randn({8, 13}, rng);
  Tensor y = m.decoder(1).postnet(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.at(i), x.at(i));
  EXPECT_EQ(m.predict_l18(x).cols(), 13u);
}

TEST(GradReverse, NegatesGradient) {
  num::Rng rng(6);
  Tensor x = Tensor::randn({3, 1}, rng).set_requires_grad(true);
  auto chain = [](const Tensor& v) { return num::sum(num::tanh(num::scale(num::square(v), 0.7))); };
  auto plain = num::gradients(chain(x), {x})[0];
  auto reversed = num::gradients(chain(num::grad_reverse(x, -1.0)), {x})[0];
  auto twice = num::gradients(chain(num::grad_reverse(num::grad_reverse(x, -1.0), -1.0)), {x})[0];
  auto fd = num::finite_diff_gradient([&](const Tensor& v) { return chain(v).item(); }, x);
  Tensor fwd = num::grad_reverse(x, -1.0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(fwd.at(i), x.at(i));
    EXPECT_NEAR(plain[i], fd[i], 1e-6);
    EXPECT_DOUBLE_EQ(reversed[i], -plain[i]);
    EXPECT_DOUBLE_EQ(twice[i], plain[i]);
  }
}

TEST(Loss, HandExamples) {
  Tensor target = Tensor::from({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  Tensor l18 = Tensor::from({1, 3}, {1, 2, 3});
  Tensor gates = gate_targets(3);
  auto perfect = bn2bn_loss(target, target, l18, gates, target, l18, gates);
  EXPECT_LE(perfect.total.item(), 1e-6);
  auto off = bn2bn_loss(num::add_scalar(target, 1.0), num::add_scalar(target, -1.0), num::add_scalar(l18, 1.0), gates,
                        target, l18, gates);
  EXPECT_NEAR(off.total.item(), 3.0, 1e-6);
  EXPECT_NEAR(off.pre, 1.0, 1e-12);
  EXPECT_NEAR(off.post, 1.0, 1e-12);
  EXPECT_NEAR(off.l18, 1.0, 1e-12);
  EXPECT_GE(off.gate, 0.0);
  EXPECT_NEAR(off.total.item(), off.pre + off.post + off.l18 + off.gate, 1e-12);
  EXPECT_THROW(bn2bn_loss(Tensor::zeros({2, 2}), target, l18, gates, target, l18, gates), ContractError);
  EXPECT_THROW(bn2bn_loss(target, target, l18, gate_targets(2), target, l18, gate_targets(2)), ContractError);
}

TEST(Config, JsonRoundTripAndValidation) {
  auto c = small_config({"x", "y", "z"});
  c.dca.attention_dim = 48;
  c.adversarial = true;
  c.n_languages = 2;
  auto back = Bn2BnConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  auto bad = c;
  bad.dca.static_kernel = 20;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.accents = {"x", "x"};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.n_languages = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(Bn2BnConfig::from_json("{nope"), ConfigError);
  EXPECT_EQ(Bn2BnConfig::paper_scale({"a"}).encoder_blocks, 12u);
}

TEST(Data, MissingManifestCellIsNamed) {
  toy::WorldConfig wc;
  wc.n_speakers = 4;
  wc.n_targets = 2;
  wc.k_contents = 3;
  auto world = toy::World::generate(wc);
  auto manifest = toy::build_timbre_matched(world, {0, 1});
  auto groups = groups_from_world(world, manifest, {0, 1}, {0, 1, 2});
  ASSERT_EQ(groups.size(), 6u);
  EXPECT_EQ(groups[0].l10.size(), world.accents().size());
  EXPECT_EQ(groups[0].l18[1].rows(), static_cast<Eigen::Index>(wc.l18_dim));
  manifest.items.erase(manifest.items.begin() + 1);
  try {
    groups_from_world(world, manifest, {0, 1}, {0, 1, 2});
    FAIL() << "expected a manifest error";
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find("accent"), std::string::npos);
  }
}

TEST(Training, OverfitsSinglePair) {
  num::Rng rng(7);
  auto cfg = small_config({"a"});
  cfg.prenet_dropout = 0.0;
  Bn2BnModel m(cfg, rng);
  Matrix x(8, 12);
  for (Eigen::Index c = 0; c < 12; ++c)
    for (Eigen::Index r = 0; r < 8; ++r) x(r, c) = std::sin(0.4 * c + r);
  ParallelGroup g;
  g.l10 = {x};
  g.l18 = {x.topRows(8)};
  Bn2BnTrainConfig tc;
  tc.steps = 600;
  tc.lr = 3e-3;
  tc.lr_final = 3e-4;
  train_bn2bn(m, {g}, tc);
  num::NoGradGuard guard;
  Tensor z = m.encode(to_tensor(x));
  auto out = m.decoder(0).teacher_force(z, to_tensor(x), nullptr);
  EXPECT_LT(num::mae(out.pre, to_tensor(x)).item(), 0.01);
}

TEST(Training, CopyTaskLearnsMonotoneAttention) {
  toy::WorldConfig wc;
  wc.n_speakers = 4;
  wc.n_targets = 2;
  wc.k_contents = 24;
  auto world = toy::World::generate(wc);
  auto manifest = toy::build_timbre_matched(world, {0, 1});
  std::vector<int> train_c, test_c;
  for (int c = 0; c < 24; ++c) (c < 20 ? train_c : test_c).push_back(c);
  auto groups = groups_from_world(world, manifest, {0, 1}, train_c);
  for (auto& g : groups) {  // copy task on accent 0 only
    g.l10.resize(1);
    g.l18.resize(1);
  }
  num::Rng rng(8);
  Bn2BnModel m(small_config({world.accents()[0].name}), rng);
  Bn2BnTrainConfig tc;
  tc.steps = 1600;
  train_bn2bn(m, groups, tc);

  int monotone = 0, steps = 0;
  double tf_err = 0, conv_err = 0;
  for (int c : test_c) {
    Matrix x = world.content_features(c, 0, 0);
    auto conv = m.convert(x, world.accents()[0].name);
    for (Eigen::Index t = 1; t < conv.alignment.rows(); ++t) {
      Eigen::Index a, b;
      conv.alignment.row(t - 1).maxCoeff(&a);
      conv.alignment.row(t).maxCoeff(&b);
      monotone += b >= a;
      ++steps;
    }
    num::NoGradGuard guard;
    auto tf = m.decoder(0).teacher_force(m.encode(to_tensor(x)), to_tensor(x), nullptr);
    tf_err += num::mae(tf.post, to_tensor(x)).item();
    conv_err += (toy::resample(conv.l10, static_cast<int>(x.cols())) - x).cwiseAbs().mean();
  }
  EXPECT_GE(monotone, 0.95 * steps);
  EXPECT_LE(conv_err, 1.5 * tf_err) << "converted " << conv_err / test_c.size() << " teacher-forced "
                                    << tf_err / test_c.size();
}
