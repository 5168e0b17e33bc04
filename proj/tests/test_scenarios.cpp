#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "nfl/scenarios.hpp"
#include "test_support.hpp"

using namespace nfl;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols) {
  std::vector<unsigned char> b;
  put_be32(b, 0x00000803);
  put_be32(b, count);
  put_be32(b, rows);
  put_be32(b, cols);
  for (std::uint32_t i = 0; i < count * rows * cols; ++i) b.push_back(static_cast<unsigned char>(i % 256));
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t count) {
  std::vector<unsigned char> b;
  put_be32(b, 0x00000801);
  put_be32(b, count);
  for (std::uint32_t i = 0; i < count; ++i) b.push_back(static_cast<unsigned char>(i % 10));
  return b;
}

LabeledSet labeled(std::size_t classes, std::size_t per_class, std::size_t dim = 3) {
  LabeledSet s;
  s.num_classes = classes;
  s.inputs.resize(static_cast<Eigen::Index>(classes * per_class), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < classes * per_class; ++i) {
    s.labels.push_back(static_cast<int>(i % classes));
    s.inputs.row(static_cast<Eigen::Index>(i)).setConstant(static_cast<double>(i));
  }
  return s;
}

}  // namespace

TEST_CASE("load_idx reads images scaled to [0, 1] and labels") {
  TempDir dir("nfl_test_idx_ok");
  auto images = idx_images(300, 2, 2);
  images[16 + 5] = 255;
  write_bytes(dir.path / "img", images);
  write_bytes(dir.path / "lbl", idx_labels(300));
  const auto set = load_idx(dir.path / "img", dir.path / "lbl");
  CHECK(set.inputs.rows() == 300);
  CHECK(set.inputs.cols() == 4);
  CHECK(set.inputs(1, 1) == 1.0);
  CHECK(set.inputs(0, 0) == 0.0);
  CHECK(set.inputs(0, 1) == doctest::Approx(1.0 / 255.0));
  CHECK(set.inputs.minCoeff() >= 0.0);
  CHECK(set.inputs.maxCoeff() <= 1.0);
  CHECK(set.labels[13] == 3);
  CHECK(set.num_classes == 10);
}

TEST_CASE("load_idx distinguishes bad magic, truncation and dimension errors") {
  TempDir dir("nfl_test_idx_bad");
  auto bad_magic = idx_images(2, 2, 2);
  bad_magic[3] = 0x04;
  write_bytes(dir.path / "magic", bad_magic);
  CHECK_THROWS_AS(load_idx_images(dir.path / "magic"), IdxMagicError);
  auto bad_label_magic = idx_labels(2);
  bad_label_magic[2] = 0x09;
  write_bytes(dir.path / "lmagic", bad_label_magic);
  CHECK_THROWS_AS(load_idx_labels(dir.path / "lmagic"), IdxMagicError);

  auto truncated = idx_images(3, 2, 2);
  truncated.pop_back();
  write_bytes(dir.path / "trunc", truncated);
  CHECK_THROWS_AS(load_idx_images(dir.path / "trunc"), IdxTruncatedError);
  write_bytes(dir.path / "hdr", std::vector<unsigned char>{0, 0, 8});
  CHECK_THROWS_AS(load_idx_images(dir.path / "hdr"), IdxTruncatedError);
  auto short_labels = idx_labels(5);
  short_labels.pop_back();
  write_bytes(dir.path / "ltrunc", short_labels);
  CHECK_THROWS_AS(load_idx_labels(dir.path / "ltrunc"), IdxTruncatedError);

  write_bytes(dir.path / "img", idx_images(4, 2, 2));
  write_bytes(dir.path / "lbl", idx_labels(3));
  CHECK_THROWS_AS(load_idx(dir.path / "img", dir.path / "lbl"), IdxDimensionError);
  write_bytes(dir.path / "zero", idx_images(4, 0, 2));
  CHECK_THROWS_AS(load_idx_images(dir.path / "zero"), IdxDimensionError);

  CHECK_THROWS_AS(load_idx_images(dir.path / "missing"), IoError);
}

TEST_CASE("bundled MNIST subset has the canonical header layout") {
  const fs::path root = NFL_TEST_DATA_DIR;
  const auto train = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte");
  const auto test = load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte");
  CHECK(train.inputs.rows() == 4000);
  CHECK(test.inputs.rows() == 1000);
  CHECK(train.inputs.cols() == 28 * 28);
  CHECK(train.num_classes == 10);
  std::vector<int> per_class(10, 0);
  for (int y : train.labels) ++per_class[static_cast<std::size_t>(y)];
  for (int c : per_class) CHECK(c == 400);
}

TEST_CASE("load_cifar_binary reads fixed-stride records") {
  TempDir dir("nfl_test_cifar");
  std::vector<unsigned char> bytes;
  for (int r = 0; r < 3; ++r) {
    bytes.push_back(static_cast<unsigned char>(r + 1));   // coarse
    bytes.push_back(static_cast<unsigned char>(97 + r));  // fine
    for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<unsigned char>(r == 1 ? 255 : 0));
  }
  write_bytes(dir.path / "ok.bin", bytes);
  const auto fine = load_cifar_binary(dir.path / "ok.bin", CifarLabel::fine);
  CHECK(fine.inputs.rows() == 3);
  CHECK(fine.inputs.cols() == 3072);
  CHECK(fine.labels == Labels{97, 98, 99});
  CHECK(fine.num_classes == 100);
  CHECK(fine.inputs.row(1).minCoeff() == 1.0);
  const auto coarse = load_cifar_binary(dir.path / "ok.bin", CifarLabel::coarse);
  CHECK(coarse.labels == Labels{1, 2, 3});

  bytes.pop_back();
  write_bytes(dir.path / "short.bin", bytes);
  CHECK_THROWS_AS(load_cifar_binary(dir.path / "short.bin", CifarLabel::fine), IdxTruncatedError);

  std::vector<unsigned char> bad(3074, 0);
  bad[1] = 100;
  write_bytes(dir.path / "label.bin", bad);
  CHECK_THROWS_AS(load_cifar_binary(dir.path / "label.bin", CifarLabel::fine), IoError);
}

TEST_CASE("split_classes partitions classes into equal disjoint tasks") {
  const auto train = labeled(10, 6), test = labeled(10, 2);
  const auto stream = split_classes(train, test, 5, 3);
  REQUIRE(stream.size() == 5);
  std::set<int> seen;
  for (std::size_t t = 0; t < 5; ++t) {
    const auto& task = stream.tasks[t];
    CHECK(task.index() == t);
    CHECK(task.num_classes() == 2);
    for (int c : task.class_ids()) CHECK(seen.insert(c).second);
    CHECK(task.train().size() == 12);
    CHECK(task.test().size() == 4);
    for (std::size_t i = 0; i < task.train().size(); ++i) {
      const int local = task.train().labels[i];
      // Inputs encode the source row index, whose class is index % 10.
      const auto src = static_cast<int>(task.train().inputs(static_cast<Eigen::Index>(i), 0));
      CHECK(task.class_ids()[static_cast<std::size_t>(local)] == src % 10);
    }
  }
  CHECK(seen.size() == 10);
  CHECK(stream.class_offset(3) == 6);
  const auto map = stream.label_map();
  CHECK(map.global_to_local.size() == 10);
  for (const auto& [global, slot] : map.global_to_local) {
    CHECK(stream.tasks[slot.task].class_ids()[slot.local] == global);
  }
}

TEST_CASE("split_classes on 100 classes into 10 tasks") {
  const auto stream = split_classes(labeled(100, 1), labeled(100, 1), 10, 1);
  for (const auto& t : stream.tasks) CHECK(t.num_classes() == 10);
}

TEST_CASE("split_classes rejects non-divisible counts and is deterministic in its seed") {
  CHECK_THROWS_AS(split_classes(labeled(10, 2), labeled(10, 1), 3, 1), InvalidArgument);
  const auto a = split_classes(labeled(10, 2), labeled(10, 1), 5, 9);
  const auto b = split_classes(labeled(10, 2), labeled(10, 1), 5, 9);
  const auto c = split_classes(labeled(10, 2), labeled(10, 1), 5, 10);
  bool any_diff = false;
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(std::ranges::equal(a.tasks[t].class_ids(), b.tasks[t].class_ids()));
    CHECK(nfl::testing::bit_identical(a.tasks[t].train().inputs, b.tasks[t].train().inputs));
    any_diff |= !std::ranges::equal(a.tasks[t].class_ids(), c.tasks[t].class_ids());
  }
  CHECK(any_diff);
}

TEST_CASE("training data access is reported; test data is not") {
  auto stream = split_classes(labeled(4, 2), labeled(4, 2), 2, 1);
  std::vector<std::size_t> seen;
  stream.set_train_access_hook([&](std::size_t t) { seen.push_back(t); });
  (void)stream.tasks[1].train();
  (void)stream.tasks[0].test();
  (void)stream.tasks[0].train();
  CHECK(seen == std::vector<std::size_t>{1, 0});
}

TEST_CASE("make_blobs is deterministic and balanced") {
  const BlobSpec spec;
  const auto [a, at] = make_blobs(spec, 5);
  const auto [b, bt] = make_blobs(spec, 5);
  CHECK(nfl::testing::bit_identical(a.inputs, b.inputs));
  CHECK(a.inputs.rows() == static_cast<Eigen::Index>(spec.classes * spec.train_per_class));
  CHECK(at.inputs.rows() == static_cast<Eigen::Index>(spec.classes * spec.test_per_class));
  CHECK(a.num_classes == spec.classes);
}

TEST_CASE("evaluate: perfect fit, protocol monotonicity and chance level") {
  // 2 tasks x 2 classes on 1-D inputs; one identity-feature trunk, heads built by hand.
  LabeledSet train, test;
  train.num_classes = test.num_classes = 4;
  test.inputs.resize(400, 1);
  for (int i = 0; i < 400; ++i) {
    test.labels.push_back(i % 4);
    test.inputs(i, 0) = static_cast<double>(i % 4) - 1.5;
  }
  train = test;
  auto stream = split_classes(train, test, 2, 1);
  ModelSpec spec;
  spec.input_dim = 1;
  spec.trunk_layers = {{2, Activation::identity}};
  spec.head_dims = {2, 2};
  Model m(spec, 3);
  m.block(0).layers[0] = {Matrix::Zero(1, 2), RowVector::Zero(2)};
  m.block(0).layers[0].weight << 1.0, -1.0;

  // Task-IL oracle: per-sample check of its own head; Class-IL oracle: argmax over all heads.
  for (std::size_t t = 0; t < 2; ++t) {
    const auto& d = stream.tasks[t].test();
    const Matrix own = m.forward_all(d.inputs).middleCols(static_cast<Eigen::Index>(stream.class_offset(t)), 2);
    CHECK(task_accuracy(m, stream, t, Mode::task_il, 2) == doctest::Approx(nfl::testing::accuracy(own, d.labels)));
    CHECK(task_accuracy(m, stream, t, Mode::class_il, 2) <= task_accuracy(m, stream, t, Mode::task_il, 2));
  }
  const auto row = evaluate(m, stream, 2, Mode::task_il);
  CHECK(row.size() == 2);
  CHECK_THROWS_AS(evaluate(m, stream, 3, Mode::task_il), InvalidArgument);
}

TEST_CASE("evaluate: a perfectly fitted single task gives a row of 1.0") {
  LabeledSet s;
  s.num_classes = 2;
  s.inputs.resize(20, 1);
  for (int i = 0; i < 20; ++i) {
    s.labels.push_back(i % 2);
    s.inputs(i, 0) = i % 2 == 0 ? -1.0 : 1.0;
  }
  const auto stream = split_classes(s, s, 1, 0);
  ModelSpec spec;
  spec.input_dim = 1;
  spec.trunk_layers = {{1, Activation::identity}};
  spec.head_dims = {2};
  Model m(spec, 1);
  m.block(0).layers[0] = {Matrix::Ones(1, 1), RowVector::Zero(1)};
  const int sign = stream.tasks[0].class_ids()[0] == 0 ? 1 : -1;
  m.block(1).layers[0] = {Matrix::Zero(1, 2), RowVector::Zero(2)};
  m.block(1).layers[0].weight << -sign, sign;
  CHECK(evaluate(m, stream, 1, Mode::task_il) == std::vector<double>{1.0});
  CHECK(evaluate(m, stream, 1, Mode::class_il) == std::vector<double>{1.0});
}

TEST_CASE("evaluate: Class-IL never beats Task-IL on random models") {
  const auto [train, test] = make_blobs(BlobSpec{6, 5, 10, 50, 1.0, 1.0}, 2);
  const auto stream = split_classes(train, test, 3, 4);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t hidden[] = {8};
    Model m(ModelSpec::mlp(5, hidden, {2, 2, 2}), seed);
    const auto til = evaluate(m, stream, 3, Mode::task_il);
    const auto cil = evaluate(m, stream, 3, Mode::class_il);
    for (std::size_t t = 0; t < 3; ++t) CHECK(cil[t] <= til[t]);
  }
}

TEST_CASE("evaluate: a random 2-class head on balanced data is near chance") {
  const auto [train, test] = make_blobs(BlobSpec{2, 10, 10, 500, 0.0, 1.0}, 8);
  const auto stream = split_classes(train, test, 1, 0);
  double sum = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::size_t hidden[] = {32};
    Model m(ModelSpec::mlp(10, hidden, {2}), seed);
    sum += task_accuracy(m, stream, 0, Mode::task_il, 1);
  }
  CHECK(std::abs(sum / 5.0 - 0.5) <= 0.05);
}
