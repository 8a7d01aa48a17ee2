// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "hiergan/error.hpp"
#include "hiergan/networks.hpp"
#include "hiergan/segmentation.hpp"
#include "test_util.hpp"

using namespace hiergan;

namespace {

// Closed-form parameter counts for the architectures, written out layer by layer.
std::int64_t generator_params(std::int64_t w, std::int64_t d, std::int64_t blocks) {
  std::int64_t n = (3 + d) * w * 9 + 2 * w;
  n += w * 2 * w * 16 + 2 * 2 * w;
  n += 2 * w * 4 * w * 16 + 2 * 4 * w;
  n += blocks * (2 * 16 * w * w * 9 + 2 * 2 * 4 * w);
  n += 4 * w * 2 * w * 16 + 2 * 2 * w;
  n += 2 * w * w * 16 + 2 * w;
  n += w * 3 * 9 + 3;
  return n;
}

std::int64_t discriminator_params(std::int64_t resolution, std::int64_t w, std::int64_t d) {
  std::int64_t n = 0, in = 3, out = w;
  for (std::int64_t r = resolution; r > 4; r /= 2) {
    n += in * out * 16 + out;
    in = out;
    out = std::min<std::int64_t>(out * 2, 128);
  }
  return n + in * 9 + in * d + d;
}

std::int64_t fusion_params(std::int64_t w) {
  return 6 * w * 9 + 2 * w + w * w * 9 + 2 * w + 4 * (2 * w * w * 9 + 4 * w) + w * 27 + 3;
}

}  // namespace

TEST(ExpressionLabel, OneHotAndBroadcast) {
  for (int k = 0; k < 4; ++k) {
    ExpressionLabel y(k, 4);
    torch::Tensor v = y.onehot();
    EXPECT_EQ(v.sum().item<float>(), 1.0f);
    EXPECT_EQ(v[k].item<float>(), 1.0f);
    torch::Tensor b = y.broadcast(5, 7);
    EXPECT_EQ(b.sizes(), (std::vector<int64_t>{4, 5, 7}));
    for (int c = 0; c < 4; ++c) EXPECT_TRUE(torch::all(b[c] == v[c]).item<bool>());
  }
  EXPECT_THROW(ExpressionLabel(4, 4), InvalidArgument);
  EXPECT_THROW(ExpressionLabel(-1, 4), InvalidArgument);
}

TEST(ExpressionLabel, BatchBroadcastChannels) {
  torch::Tensor idx = torch::tensor({2, 0, 3}, torch::kInt64);
  torch::Tensor b = labels_broadcast(idx, 4, 6, 6);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 4; ++c) {
      const float want = c == idx[i].item<int64_t>() ? 1.0f : 0.0f;
      EXPECT_TRUE(torch::all(b[i][c] == want).item<bool>()) << "item " << i << " channel " << c;
    }
  EXPECT_THROW(labels_onehot(torch::tensor({4}, torch::kInt64), 4), InvalidArgument);
}

TEST(Generator, LabelChannelsReachTheFirstLayer) {
  // With the image zeroed, the stem sees only the label planes; swapping the stem weights
  // for the label channel k must change the output for label k and no other.
  torch::manual_seed(0);
  Generator g(GeneratorOptions{32, 4, 4, 1});
  torch::Tensor x = torch::zeros({4, 3, 32, 32});
  torch::Tensor labels = torch::arange(4, torch::kInt64);
  torch::Tensor before = g->forward(x, labels);
  auto stem = g->named_parameters()["body.0.body.0.weight"];
  {
    torch::NoGradGuard guard;
    stem.index_put_({torch::indexing::Slice(), 3 + 2}, torch::randn_like(stem.select(1, 5)));
  }
  torch::Tensor after = g->forward(x, labels);
  for (int k = 0; k < 4; ++k) {
    const bool changed = !torch::equal(before[k], after[k]);
    EXPECT_EQ(changed, k == 2) << "label " << k;
  }
}

TEST(Generator, ShapeRangeAndFinite) {
  torch::manual_seed(1);
  Generator g(GeneratorOptions{64, 4, 8, 6});
  torch::Tensor x = torch::rand({8, 3, 64, 64}) * 2 - 1;
  torch::Tensor y = gen_translate(g, x, torch::randint(0, 4, {8}, torch::kInt64));
  EXPECT_EQ(y.sizes(), x.sizes());
  EXPECT_TRUE(torch::isfinite(y).all().item<bool>());
  EXPECT_LE(y.abs().max().item<float>(), 1.0f);
  EXPECT_EQ(gen_translate(g, x.slice(0, 0, 2), ExpressionLabel(1, 4)).size(0), 2);
}

TEST(Generator, RejectsMismatchedInput) {
  Generator g(GeneratorOptions{32, 4, 4, 1});
  EXPECT_THROW(g->forward(torch::zeros({1, 3, 64, 64}), torch::zeros({1}, torch::kInt64)), InvalidArgument);
  EXPECT_THROW(g->forward(torch::zeros({2, 3, 32, 32}), torch::zeros({1}, torch::kInt64)), InvalidArgument);
  EXPECT_THROW(gen_translate(g, torch::zeros({1, 3, 32, 32}), ExpressionLabel(1, 5)), InvalidArgument);
}

TEST(Generator, LabelSensitiveAfterOneStep) {
  torch::manual_seed(2);
  Generator g(GeneratorOptions{32, 4, 4, 1});
  torch::Tensor x = torch::rand({2, 3, 32, 32}) * 2 - 1;
  torch::Tensor happy = torch::full({2}, 1, torch::kInt64), sad = torch::full({2}, 2, torch::kInt64);
  torch::optim::Adam opt(g->parameters(), torch::optim::AdamOptions(1e-3));
  // push label 1 up and label 2 down
  opt.zero_grad();
  (g->forward(x, sad).mean() - g->forward(x, happy).mean()).backward();
  opt.step();
  EXPECT_GT((g->forward(x, happy) - g->forward(x, sad)).abs().sum().item<float>(), 0.0f);
}

TEST(Discriminator, ShapeContract) {
  torch::manual_seed(3);
  Discriminator d(DiscriminatorOptions{64, 4, 16, 128});
  EXPECT_EQ(d->downsampling_stages(), 4);
  DiscriminatorOutput o = disc_forward(d, torch::rand({5, 3, 64, 64}) * 2 - 1);
  EXPECT_EQ(o.realness.sizes(), (std::vector<int64_t>{5, 1, 4, 4}));
  EXPECT_EQ(o.logits.sizes(), (std::vector<int64_t>{5, 4}));
  EXPECT_LT((torch::softmax(o.logits, 1).sum(1) - 1).abs().max().item<float>(), 1e-6f);
  Discriminator dp(DiscriminatorOptions{32, 4, 16, 128});
  EXPECT_EQ(disc_forward(dp, torch::zeros({1, 3, 32, 32})).realness.sizes(), (std::vector<int64_t>{1, 1, 4, 4}));
  EXPECT_THROW(disc_forward(d, torch::zeros({1, 3, 32, 32})), InvalidArgument);
}

TEST(Discriminator, Deterministic) {
  torch::manual_seed(4);
  Discriminator d(DiscriminatorOptions{64, 4, 16, 128});
  torch::Tensor x = torch::rand({3, 3, 64, 64});
  DiscriminatorOutput a = d->forward(x), b = d->forward(x);
  EXPECT_TRUE(torch::equal(a.realness, b.realness));
  EXPECT_TRUE(torch::equal(a.logits, b.logits));
}

TEST(Fusion, ShapeRangeAndManifest) {
  torch::manual_seed(5);
  FusionNetwork f(FusionOptions{8});
  torch::Tensor out = fuse(f, torch::rand({2, 3, 64, 64}) * 2 - 1, torch::rand({2, 3, 64, 64}) * 2 - 1);
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{2, 3, 64, 64}));
  EXPECT_LE(out.abs().max().item<float>(), 1.0f);
  const std::vector<std::string> expect = {"conv_block 6->8", "conv_block 8->8", "res_block 8->8", "res_block 8->8",
                                           "res_block 8->8",  "res_block 8->8",  "conv 8->3",      "tanh"};
  EXPECT_EQ(f->layer_manifest(), expect);
  EXPECT_THROW(fuse(f, torch::zeros({1, 3, 64, 64}), torch::zeros({1, 3, 32, 32})), InvalidArgument);
  EXPECT_THROW(fuse(f, torch::zeros({1, 4, 64, 64}), torch::zeros({1, 4, 64, 64})), InvalidArgument);
}

TEST(Fusion, GradientReachesBothInputsAndMatchesFiniteDifferences) {
  torch::manual_seed(6);
  FusionNetwork f(FusionOptions{4});
  f->to(torch::kFloat64);
  torch::Tensor g = (torch::rand({1, 3, 16, 16}, torch::kFloat64) * 2 - 1).requires_grad_(true);
  torch::Tensor l = (torch::rand({1, 3, 16, 16}, torch::kFloat64) * 2 - 1).requires_grad_(true);
  fuse(f, g, l).pow(2).sum().backward();
  for (torch::Tensor* input : {&g, &l}) {
    torch::Tensor grad = input->grad().flatten();
    ASSERT_GT(grad.abs().max().item<double>(), 0.0);
    torch::NoGradGuard guard;
    torch::Tensor order = grad.abs().argsort(0, true).slice(0, 0, 5);
    for (int k = 0; k < 5; ++k) {
      const int64_t i = order[k].item<int64_t>();
      torch::Tensor base = input->detach().clone();
      auto eval = [&](double delta) {
        torch::Tensor v = base.clone();
        v.view({-1})[i] += delta;
        torch::Tensor gg = input == &g ? v : g.detach();
        torch::Tensor ll = input == &l ? v : l.detach();
        return fuse(f, gg, ll).pow(2).sum().item<double>();
      };
      const double numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
      EXPECT_NEAR(grad[i].item<double>(), numeric, 1e-5 * std::max(1.0, std::abs(numeric)));
    }
  }
}

TEST(BuildNetworks, CountsMatchClosedForm) {
  NetworkConfig c;
  Networks nets = build_networks(c);
  EXPECT_EQ(parameter_count(*nets.generator(NetId::global)),
            generator_params(c.global_width, c.label_dim, c.global_res_blocks));
  for (NetId id : {NetId::le, NetId::re, NetId::n, NetId::m}) {
    EXPECT_EQ(parameter_count(*nets.generator(id)), generator_params(c.local_width, c.label_dim, c.local_res_blocks));
    EXPECT_EQ(parameter_count(*nets.discriminator(id)), discriminator_params(c.part_size, c.disc_width, c.label_dim));
  }
  EXPECT_EQ(parameter_count(*nets.discriminator(NetId::global)),
            discriminator_params(c.resolution, c.disc_width, c.label_dim));
  EXPECT_EQ(parameter_count(*nets.discriminator(NetId::fusion)),
            discriminator_params(c.resolution, c.disc_width, c.label_dim));
  EXPECT_EQ(parameter_count(*nets.fusion), fusion_params(c.fusion_width));
}

TEST(BuildNetworks, SameSeedSameParameters) {
  NetworkConfig c;
  c.seed = 11;
  Networks a = build_networks(c), b = build_networks(c);
  auto pa = a.generator(NetId::m)->parameters(), pb = b.generator(NetId::m)->parameters();
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::equal(pa[i], pb[i]));
  auto fa = a.fusion->parameters(), fb = b.fusion->parameters();
  for (size_t i = 0; i < fa.size(); ++i) EXPECT_TRUE(torch::equal(fa[i], fb[i]));
  c.seed = 12;
  Networks other = build_networks(c);
  EXPECT_FALSE(torch::equal(other.fusion->parameters()[0], fa[0]));
}

TEST(BuildNetworks, InvalidConfigListsKeys) {
  NetworkConfig c;
  c.label_dim = 0;
  c.disc_width = 0;
  try {
    build_networks(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("label_dim"), std::string::npos);
    EXPECT_NE(msg.find("disc_width"), std::string::npos);
  }
}

TEST(BuildNetworks, FiniteAtInitialization) {
  NetworkConfig c;
  Networks nets = build_networks(c);
  torch::manual_seed(7);
  torch::Tensor x = torch::rand({2, 3, 64, 64}) * 2 - 1;
  torch::Tensor p = torch::rand({2, 3, 32, 32}) * 2 - 1;
  torch::Tensor y = torch::tensor({0, 3}, torch::kInt64);
  EXPECT_TRUE(torch::isfinite(nets.generator(NetId::global)->forward(x, y)).all().item<bool>());
  EXPECT_TRUE(torch::isfinite(nets.generator(NetId::n)->forward(p, y)).all().item<bool>());
  EXPECT_TRUE(torch::isfinite(fuse(nets.fusion, x, x)).all().item<bool>());
  for (NetId id : kAllNets) {
    DiscriminatorOutput o = nets.discriminator(id)->forward(is_local(id) ? p : x);
    EXPECT_TRUE(torch::isfinite(o.realness).all().item<bool>()) << net_name(id);
    EXPECT_TRUE(torch::isfinite(o.logits).all().item<bool>()) << net_name(id);
  }
  EXPECT_THROW(nets.generator(NetId::fusion), InvalidArgument);
}
