#include <gtest/gtest.h>

#include <random>

#include "mct/maps.hpp"
#include "mct/pipeline.hpp"

using namespace mct;

namespace {

// Row-stochastic random attention for L layers x H heads over T tokens.
AttentionStack<double> random_stack(std::size_t layers, std::size_t heads, std::size_t t,
                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.01, 1);
  AttentionStack<double> s{layers, heads, {}};
  for (std::size_t i = 0; i < layers * heads; ++i) {
    Tensor<double> a({t, t});
    for (std::size_t r = 0; r < t; ++r) {
      double z = 0;
      for (std::size_t c = 0; c < t; ++c) z += (a.at(r, c) = u(rng));
      for (std::size_t c = 0; c < t; ++c) a.at(r, c) /= z;
    }
    s.maps.push_back(a);
  }
  return s;
}

}  // namespace

TEST(Maps, FuseWithKOneIsLastLayerHeadMean) {
  auto s = random_stack(4, 3, 6, 1);
  auto f = fuse_attention(s, 1);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double mean = (s.at(3, 0)[i] + s.at(3, 1)[i] + s.at(3, 2)[i]) / 3;
    EXPECT_NEAR(f[i], mean, 1e-15);
  }
  EXPECT_THROW(fuse_attention(s, 0), ConfigError);
  EXPECT_THROW(fuse_attention(s, 5), ConfigError);
}

TEST(Maps, FuseOfIdenticalLayersIsThatLayer) {
  auto s = random_stack(1, 2, 5, 2);
  AttentionStack<double> rep{3, 2, {}};
  for (int l = 0; l < 3; ++l) rep.maps.insert(rep.maps.end(), s.maps.begin(), s.maps.end());
  auto a = fuse_attention(rep, 3), b = fuse_attention(s, 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Maps, FusedAttentionStaysRowStochastic) {
  auto f = fuse_attention(random_stack(4, 4, 7, 3), 3);
  for (std::size_t r = 0; r < 7; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 7; ++c) z += f.at(r, c);
    EXPECT_NEAR(z, 1.0, 1e-14);
  }
}

TEST(Maps, ClassToPatchSliceAndNormalization) {
  // entry (r, c) = 100 r + c marks its source position
  const std::size_t C = 2, N = 2, T = C + N * N;
  Tensor<double> f({T, T});
  for (std::size_t r = 0; r < T; ++r)
    for (std::size_t c = 0; c < T; ++c) f.at(r, c) = 100.0 * double(r) + double(c);
  auto m = extract_class_to_patch(f, C, N);
  ASSERT_EQ(m.maps.shape(), (Shape{2, 2, 2}));
  // row r takes columns 2..5 -> values r*100 + {2,3,4,5}, min-max -> {0,1/3,2/3,1}
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(m.maps[k * 4 + j], double(j) / 3, 1e-15);
  EXPECT_THROW(extract_class_to_patch(f, 3, 2), DimensionError);
}

TEST(Maps, UniformAttentionGivesZeroMaps) {
  const std::size_t C = 3, N = 3, T = C + N * N;
  Tensor<double> f({T, T}, 1.0 / double(T));
  auto m = extract_class_to_patch(f, C, N);
  for (double v : m.maps.data()) EXPECT_EQ(v, 0.0);
}

TEST(Maps, NormalizedMapsSpanZeroToOne) {
  auto f = fuse_attention(random_stack(2, 2, 3 + 16, 4), 2);
  auto m = extract_class_to_patch(f, 3, 4);
  for (std::size_t k = 0; k < 3; ++k) {
    double lo = 1, hi = 0;
    for (std::size_t j = 0; j < 16; ++j) {
      lo = std::min(lo, m.maps[k * 16 + j]);
      hi = std::max(hi, m.maps[k * 16 + j]);
    }
    EXPECT_EQ(lo, 0.0);
    EXPECT_EQ(hi, 1.0);
  }
}

TEST(Maps, AffinityIsThePatchBlockRenormalized) {
  const std::size_t C = 2, N = 2, T = 6;
  auto f = fuse_attention(random_stack(1, 1, T, 5), 1);
  auto a = extract_affinity(f, C, N);
  auto raw = extract_affinity(f, C, N, true);
  for (std::size_t i = 0; i < 4; ++i) {
    double z = 0, zr = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(raw.matrix.at(i, j), f.at(C + i, C + j));
      z += a.matrix.at(i, j);
      zr += raw.matrix.at(i, j);
    }
    EXPECT_NEAR(z, 1.0, 1e-15);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a.matrix.at(i, j), raw.matrix.at(i, j) / zr, 1e-15);
  }
}

TEST(Maps, RefineWithIdentityIsNoOp) {
  LocalizationMaps<double> in{Tensor<double>({2, 2, 2}, std::vector<double>{0, .5, 1, .25, 1, 0, .3, .7}),
                              MapKind::Fused, {}};
  PatchAffinity<double> eye{Tensor<double>::eye(4), 2};
  auto out = refine(in, eye, 3);
  EXPECT_EQ(out.maps, in.maps);
  EXPECT_EQ(out.kind, MapKind::Refined);
}

TEST(Maps, RefineMatchesDoubleLoop) {
  // 2 x 2 grid: refined(c, i) = sum_j A(i, j) map(c, j)
  auto A = Tensor<double>::matrix({{0.5, 0.5, 0, 0}, {0.25, 0.25, 0.25, 0.25}, {0, 0, 1, 0}, {0.1, 0.2, 0.3, 0.4}});
  LocalizationMaps<double> in{Tensor<double>({1, 2, 2}, std::vector<double>{1, 0, 0.5, 0.2}), MapKind::Fused, {}};
  auto out = refine(in, PatchAffinity<double>{A, 2});
  EXPECT_NEAR(out.maps[0], 0.5, 1e-15);
  EXPECT_NEAR(out.maps[1], 0.425, 1e-15);
  EXPECT_NEAR(out.maps[2], 0.5, 1e-15);
  EXPECT_NEAR(out.maps[3], 0.1 + 0.15 + 0.08, 1e-15);
  // two iterations equal refining the refined map
  auto twice = refine(in, PatchAffinity<double>{A, 2}, 2);
  auto again = refine(out, PatchAffinity<double>{A, 2});
  EXPECT_EQ(twice.maps, again.maps);
}

TEST(Maps, RowStochasticRefineIsConvex) {
  auto f = fuse_attention(random_stack(3, 2, 2 + 9, 6), 3);
  auto m = extract_class_to_patch(f, 2, 3);
  auto r = refine(m, extract_affinity(f, 2, 3));
  for (std::size_t k = 0; k < 2; ++k) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t j = 0; j < 9; ++j) {
      lo = std::min(lo, m.maps[k * 9 + j]);
      hi = std::max(hi, m.maps[k * 9 + j]);
    }
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GE(r.maps[k * 9 + j], lo - 1e-15);
      EXPECT_LE(r.maps[k * 9 + j], hi + 1e-15);
    }
  }
}

TEST(Maps, PatchCamReluThenMinMax) {
  auto f = Tensor<double>({1, 2, 2}, std::vector<double>{-1, 2, 0, 1});
  auto p = patch_cam(f);
  EXPECT_EQ(p.maps, Tensor<double>({1, 2, 2}, std::vector<double>{0, 1, 0, 0.5}));
  auto neg = patch_cam(Tensor<double>({1, 2, 2}, -3.0));
  for (double v : neg.maps.data()) EXPECT_EQ(v, 0.0);
}

TEST(Maps, FusionIsProductRenormalized) {
  LocalizationMaps<double> a{Tensor<double>({1, 2, 2}, std::vector<double>{0, 0.5, 1, 1}), MapKind::MctAttention, {}};
  LocalizationMaps<double> b{Tensor<double>({1, 2, 2}, std::vector<double>{1, 0.5, 0.5, 0}), MapKind::PatchCAM, {}};
  // product {0, 0.25, 0.5, 0} -> {0, 0.5, 1, 0}
  auto f = fuse_maps(a, b);
  EXPECT_EQ(f.maps, Tensor<double>({1, 2, 2}, std::vector<double>{0, 0.5, 1, 0}));
  EXPECT_THROW(fuse_maps(b, a), ConfigError);
}

TEST(Maps, BilinearUpsampleHalfPixel) {
  LocalizationMaps<double> in{Tensor<double>({1, 2, 2}, std::vector<double>{0, 0.2, 0.6, 1.0}),
                              MapKind::Fused, {}};
  auto out = upsample_maps(in, 4).maps;
  // source coordinates of the 4 output pixels: -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
  const double w[4] = {0, 0.25, 0.75, 1};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const double top = 0 * (1 - w[x]) + 0.2 * w[x];
      const double bot = 0.6 * (1 - w[x]) + 1.0 * w[x];
      EXPECT_NEAR(out[y * 4 + x], top * (1 - w[y]) + bot * w[y], 1e-15);
    }
  EXPECT_NEAR(out[1 * 4 + 2], 0.3375, 1e-15);
  // same size is the identity
  EXPECT_EQ(upsample_maps(in, 2).maps, in.maps);
}

TEST(Maps, ClassFilterZeroesAbsentClasses) {
  LocalizationMaps<double> in{Tensor<double>({3, 2, 2}, 0.5), MapKind::Fused, {}};
  auto out = apply_class_filter(in, {1, 0, 1});
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out.maps[i], 0.5);
    EXPECT_EQ(out.maps[4 + i], 0.0);
  }
  EXPECT_THROW(apply_class_filter(in, {1, 0}), DimensionError);
}

TEST(Maps, PgmEncoding) {
  auto m = Tensor<double>({1, 1, 2}, std::vector<double>{0, 1});
  const std::string pgm = encode_pgm(m, 0);
  EXPECT_EQ(pgm.substr(0, 11), "P5\n2 1\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(pgm[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(pgm[12]), 255);
}

TEST(Pipeline, StagesAreBoundedAndParseable) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.grid = 4;
  cfg.image_size = 16;
  cfg.embed_dim = 8;
  cfg.layers = 3;
  cfg.heads = 2;
  cfg.fuse_layers = 2;
  auto p = init_params<float>(cfg, 1);
  Tensor<float> img({3, 16, 16}, 0.5f);
  for (std::size_t i = 0; i < img.size(); i += 7) img[i] = 0.9f;
  auto inf = infer(p, cfg, img);
  for (Stage s : {Stage::Attention, Stage::AttentionAffinity, Stage::PatchCam, Stage::Fused,
                  Stage::FusedAffinity}) {
    EXPECT_EQ(parse_stage(kind_name(s)), s);
    auto m = seed_maps(inf, cfg, s, MapOptions::from(cfg), {1, 1, 0});
    ASSERT_EQ(m.maps.shape(), (Shape{3, 16, 16}));
    for (std::size_t i = 0; i < m.maps.size(); ++i) {
      EXPECT_GE(m.maps[i], 0.0f);
      EXPECT_LE(m.maps[i], 1.0f);
      if (i >= 2 * 256) { EXPECT_EQ(m.maps[i], 0.0f); }
    }
  }
  EXPECT_THROW(parse_stage("bogus"), ConfigError);
}
