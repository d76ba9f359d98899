#include <set>

#include "juap/image_io.hpp"
#include "test_util.hpp"

namespace juap {
namespace {

DatasetManifest manifest_for(const fs::path& root, uint64_t seed) {
  DatasetManifest m;
  m.root_path = root;
  m.seed = seed;
  return m;
}

class DatasetOnDisk : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(test::fresh_dir("dataset"));
    write_synthetic_shapes(*root_, {10, 32, 3});
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static fs::path* root_;
};
fs::path* DatasetOnDisk::root_ = nullptr;

TEST(SyntheticShapes, ShapesLabelsAndRange) {
  auto b = make_synthetic_shapes({5, 32, 1});
  ASSERT_EQ(b.pixels.sizes(), (std::vector<int64_t>{30, 3, 32, 32}));
  EXPECT_GE(b.pixels.min().item<float>(), 0.0f);
  EXPECT_LE(b.pixels.max().item<float>(), 1.0f);
  auto counts = torch::bincount(b.labels, {}, 6);
  EXPECT_TRUE(counts.eq(5).all().item<bool>());
  EXPECT_TRUE(torch::equal(b.pixels, make_synthetic_shapes({5, 32, 1}).pixels));
  EXPECT_FALSE(torch::equal(b.pixels, make_synthetic_shapes({5, 32, 2}).pixels));
}

TEST_F(DatasetOnDisk, SixClassLayoutGivesSixLabels) {
  auto ds = load_dataset(manifest_for(*root_, 7));
  EXPECT_EQ(ds.num_classes, 6);
  EXPECT_EQ(ds.class_names, synthetic_class_names());
  EXPECT_EQ(ds.train.size(), 48);
  EXPECT_EQ(ds.test.size(), 12);
  EXPECT_GE(ds.train.data.labels.min().item<int64_t>(), 0);
  EXPECT_LE(ds.train.data.labels.max().item<int64_t>(), 5);
}

TEST_F(DatasetOnDisk, SameSeedGivesSameSplit) {
  auto a = load_dataset(manifest_for(*root_, 7));
  auto b = load_dataset(manifest_for(*root_, 7));
  EXPECT_EQ(a.train.indices, b.train.indices);
  EXPECT_EQ(a.test.indices, b.test.indices);
  auto c = load_dataset(manifest_for(*root_, 8));
  EXPECT_NE(a.train.indices, c.train.indices);

  std::set<int64_t> seen(a.train.indices.begin(), a.train.indices.end());
  for (auto i : a.test.indices) EXPECT_EQ(seen.count(i), 0u);
}

TEST_F(DatasetOnDisk, PngRoundTripIsExact) {
  auto img = read_image(*root_ / "0_disk" / "00000.png");
  auto again = make_synthetic_shapes({10, 32, 3}).pixels[0];
  EXPECT_LT((img - again).abs().max().item<float>(), 0.5f / 255.0f + 1e-6f);
}

TEST_F(DatasetOnDisk, ManifestFromConfigFile) {
  auto cfg = Config::load(*root_ / "manifest.cfg");
  auto m = DatasetManifest::from_config(cfg, *root_);
  EXPECT_EQ(m.name, "synthetic-shapes");
  EXPECT_EQ(m.image_height, 32);
  EXPECT_EQ(load_dataset(m).num_classes, 6);
}

TEST_F(DatasetOnDisk, FewerDeclaredClassesThanDirectoriesIsRejected) {
  auto m = manifest_for(*root_, 1);
  m.num_classes = 4;
  EXPECT_THROW(load_dataset(m), InputError);
}

TEST(DatasetManifest, FractionsAboveOneAreRejected) {
  DatasetManifest m;
  m.train_fraction = 0.8;
  m.test_fraction = 0.3;
  EXPECT_THROW(m.validate(), InputError);
}

TEST(DatasetManifest, MissingRootIsAnInputError) {
  EXPECT_THROW(load_dataset(manifest_for("/nonexistent/juap-data", 0)), InputError);
}

TEST(Augment, DisabledIsBitwiseIdentity) {
  auto b = make_synthetic_shapes({2, 32, 0});
  auto out = augment(b, AugmentConfig{}, 3);
  EXPECT_TRUE(torch::equal(out.pixels, b.pixels));
  EXPECT_TRUE(torch::equal(out.labels, b.labels));
}

TEST(Augment, CertainFlipMirrorsTheImage) {
  auto b = make_synthetic_shapes({1, 32, 0}).slice(0, 1);
  AugmentConfig cfg;
  cfg.horizontal_flip = true;
  cfg.flip_probability = 1.0;
  auto out = augment(b, cfg, 9);
  EXPECT_TRUE(torch::equal(out.pixels, b.pixels.flip({3})));
}

TEST(Augment, SameSeedSameOutput) {
  auto b = make_synthetic_shapes({3, 32, 0});
  AugmentConfig cfg{true, 4, true, 0.5};
  EXPECT_TRUE(torch::equal(augment(b, cfg, 11).pixels, augment(b, cfg, 11).pixels));
  EXPECT_FALSE(torch::equal(augment(b, cfg, 11).pixels, augment(b, cfg, 12).pixels));
  cfg.flip_probability = 1.5;
  EXPECT_THROW(augment(b, cfg, 1), InputError);
}

TEST(BatchStream, BatchesArePureAndCoverEachEpoch) {
  auto split = test::as_split(make_synthetic_shapes({5, 32, 0}));
  split.data.labels = torch::arange(split.size());
  BatchStream stream(split, 7, 42);
  EXPECT_EQ(stream.batches_per_epoch(), 5);
  std::multiset<int64_t> seen;
  for (int64_t s = 0; s < stream.batches_per_epoch(); ++s) {
    auto b = stream.batch(s);
    for (int64_t i = 0; i < b.size(); ++i) seen.insert(b.labels[i].item<int64_t>());
  }
  EXPECT_EQ(seen.size(), 30u);
  EXPECT_EQ(std::set<int64_t>(seen.begin(), seen.end()).size(), 30u);
  BatchStream again(split, 7, 42);
  EXPECT_TRUE(torch::equal(stream.batch(13).labels, again.batch(13).labels));
  EXPECT_THROW(BatchStream(split, 0, 1), InputError);
}

}  // namespace
}  // namespace juap
