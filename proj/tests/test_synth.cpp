#include <gtest/gtest.h>

#include <filesystem>

#include "mct/synth.hpp"

using namespace mct;

namespace {

std::filesystem::path scratch(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Synth, SameSeedSameBytes) {
  synth::DatasetSpec spec;
  spec.num_samples = 5;
  auto a = synth::generate(spec), b = synth::generate(spec);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
  }
  spec.seed = 1;
  EXPECT_NE(synth::generate(spec)[0].image, a[0].image);
}

TEST(Synth, SamplesDoNotDependOnDatasetSize) {
  synth::DatasetSpec small, large;
  small.num_samples = 3;
  large.num_samples = 10;
  EXPECT_EQ(synth::generate(small)[2].mask, synth::generate(large)[2].mask);
}

TEST(Synth, SingleObjectHasExactlyOneLabel) {
  synth::DatasetSpec spec;
  spec.num_samples = 100;
  spec.max_objects = 1;
  for (const auto& s : synth::generate(spec)) {
    int n = 0;
    for (auto l : s.labels) n += l;
    EXPECT_EQ(n, 1);
  }
}

TEST(Synth, LabelsMasksAndRanges) {
  synth::DatasetSpec spec;
  spec.num_samples = 1000;
  spec.num_classes = 5;
  const auto ds = synth::generate(spec);
  const std::size_t px = spec.image_size * spec.image_size;
  std::vector<std::size_t> class_images(5, 0);
  for (const auto& s : ds) {
    ASSERT_EQ(s.mask.size(), px);
    std::vector<std::size_t> area(6, 0);
    for (auto v : s.mask) {
      ASSERT_LE(v, 5);
      ++area[v];
    }
    std::size_t objects = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_EQ(s.labels[c] != 0, area[c + 1] > 0);
      objects += s.labels[c];
      class_images[c] += s.labels[c];
    }
    EXPECT_GE(objects, 1u);
    EXPECT_LE(objects, 3u);
    EXPECT_GE(10 * area[0], 3 * px);  // background keeps at least 30%
    for (float v : s.image.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  for (std::size_t c = 0; c < 5; ++c) EXPECT_GE(class_images[c] * 10, ds.size()) << "class " << c;
}

TEST(Synth, ObjectsAreColourSeparable) {
  // mean object colour lies closer to its class colour than to any other
  synth::DatasetSpec spec;
  spec.num_samples = 50;
  for (const auto& s : synth::generate(spec)) {
    const std::size_t px = spec.image_size * spec.image_size;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      if (!s.labels[c]) continue;
      double mean[3] = {0, 0, 0};
      double n = 0;
      for (std::size_t i = 0; i < px; ++i)
        if (s.mask[i] == c + 1) {
          for (int ch = 0; ch < 3; ++ch) mean[ch] += s.image[ch * px + i];
          ++n;
        }
      std::size_t best = 0;
      double best_d = 1e9;
      for (std::size_t k = 0; k < synth::kClassColors.size(); ++k) {
        double d = 0;
        for (int ch = 0; ch < 3; ++ch) d += std::pow(mean[ch] / n - synth::kClassColors[k][ch], 2);
        if (d < best_d) best_d = d, best = k;
      }
      EXPECT_EQ(best, c);
    }
  }
}

TEST(Synth, HflipMirrorsImageAndMask) {
  synth::DatasetSpec spec;
  spec.num_samples = 1;
  const auto s = synth::generate(spec)[0];
  const auto f = synth::hflip(s);
  const std::size_t n = spec.image_size;
  EXPECT_EQ(f.labels, s.labels);
  EXPECT_EQ(f.mask[3 * n + 0], s.mask[3 * n + n - 1]);
  EXPECT_EQ(f.image[(2 * n + 5) * n + 7], s.image[(2 * n + 5) * n + n - 8]);
  EXPECT_EQ(synth::hflip(f).image, s.image);
}

TEST(Synth, SaveLoadRoundTrip) {
  synth::DatasetSpec spec;
  spec.num_samples = 7;
  spec.seed = 42;
  const auto ds = synth::generate(spec);
  const auto dir = scratch("mct_test_synth");
  synth::save(dir, spec, ds);
  const auto back = synth::load(dir);
  EXPECT_EQ(back.spec.to_manifest().str(), spec.to_manifest().str());
  ASSERT_EQ(back.samples.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(back.samples[i].image, ds[i].image);
    EXPECT_EQ(back.samples[i].mask, ds[i].mask);
    EXPECT_EQ(back.samples[i].labels, ds[i].labels);
  }
  const std::string manifest = io::read_file(dir / "manifest.txt");
  EXPECT_NE(manifest.find("seed=42\n"), std::string::npos);
  EXPECT_NE(manifest.find("num_samples=7\n"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Synth, CorruptDatasetsAreFormatErrors) {
  synth::DatasetSpec spec;
  spec.num_samples = 2;
  const auto dir = scratch("mct_test_synth_bad");
  synth::save(dir, spec, synth::generate(spec));
  const std::string masks = io::read_file(dir / "masks.mct1");
  io::write_file(dir / "masks.mct1", masks.substr(0, masks.size() / 2));
  EXPECT_THROW(synth::load(dir), FormatError);
  io::save_tensor(dir / "masks.mct1", Tensor<float>({2, 64, 64}, 9.0f));
  EXPECT_THROW(synth::load(dir), FormatError);
  io::save_tensor(dir / "masks.mct1", Tensor<float>({2, 32, 32}));
  EXPECT_THROW(synth::load(dir), FormatError);
  std::filesystem::remove(dir / "manifest.txt");
  EXPECT_THROW(synth::load(dir), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Synth, InvalidSpecsAreConfigErrors) {
  synth::DatasetSpec spec;
  spec.min_size = 20;
  EXPECT_THROW(synth::generate(spec), ConfigError);
  spec = {};
  spec.min_objects = 3;
  spec.max_objects = 2;
  EXPECT_THROW(synth::generate(spec), ConfigError);
  spec = {};
  spec.max_objects = 4;
  EXPECT_THROW(synth::generate(spec), ConfigError);
  spec = {};
  spec.num_classes = 6;
  EXPECT_THROW(synth::generate(spec), ConfigError);
  spec = {};
  spec.image_size = 30;
  EXPECT_THROW(synth::generate(spec), ConfigError);
  spec = {};
  spec.num_samples = 0;
  EXPECT_THROW(synth::generate(spec), ConfigError);
}
