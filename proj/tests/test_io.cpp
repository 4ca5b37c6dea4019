#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "generators.hpp"
#include "mprcnn/checkpoint.hpp"
#include "mprcnn/image.hpp"
#include "mprcnn/keyvalue.hpp"

using namespace mprcnn;
using mprcnn::testsupport::Gen;

namespace {

std::string temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "mprcnn_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST(KeyValues, ParsesCommentsSectionsAndLists) {
  std::stringstream ss("# header\n[scene]\nwidth = 160  # px\nweights = 0.5, 0.25,0.25\nname=demo\nflag = true\n");
  const auto kv = KeyValues::parse(ss);
  EXPECT_EQ(kv.get<int>("width", 0), 160);
  EXPECT_EQ(kv.get<std::string>("name", ""), "demo");
  EXPECT_TRUE(kv.get<bool>("flag", false));
  EXPECT_EQ(kv.get_list<double>("weights", {}), (std::vector<double>{0.5, 0.25, 0.25}));
  EXPECT_EQ(kv.get<int>("missing", 7), 7);
  EXPECT_FALSE(kv.has("missing"));
}

TEST(KeyValues, ErrorsNameTheLineOrKey) {
  std::stringstream bad("a = 1\nnot a pair\n");
  try {
    (void)KeyValues::parse(bad, "cfg.ini");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("cfg.ini:2"), std::string::npos);
  }
  std::stringstream num("width = 12px\n");
  const auto kv = KeyValues::parse(num);
  try {
    (void)kv.get<int>("width", 0);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
  }
}

TEST(KeyValues, FormatExactRoundTrips) {
  Gen gen(91);
  for (int i = 0; i < 1000; ++i) {
    const double v = gen.normal(0, 1e3) * std::pow(10.0, gen.integer(-8, 8));
    EXPECT_EQ(std::stod(format_exact(v)), v);
  }
  EXPECT_EQ(format_exact(0.5), "0.5");
}

TEST(KeyValues, SaveLoadRoundTrip) {
  KeyValues kv;
  kv.set("alpha", "1");
  kv.set("beta", "x,y");
  const auto path = temp_file("kv.ini");
  kv.save(path);
  EXPECT_EQ(KeyValues::load(path).values(), kv.values());
}

TEST(Pgm, RoundTrip) {
  Gen gen(92);
  GrayImage img(37, 21);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(gen.integer(0, 255));
  const auto path = temp_file("img.pgm");
  write_pgm(path, img);
  EXPECT_EQ(read_pgm(path), img);
}

TEST(Pgm, RejectsBadFiles) {
  const auto path = temp_file("bad.pgm");
  { std::ofstream(path) << "P2\n2 2\n255\n0 0 0 0\n"; }
  EXPECT_THROW((void)read_pgm(path), FormatError);
  { std::ofstream(path, std::ios::binary) << "P5\n4 4\n255\nab"; }
  EXPECT_THROW((void)read_pgm(path), FormatError);
  EXPECT_THROW((void)read_pgm(temp_file("does_not_exist.pgm")), std::runtime_error);
}

TEST(Image, ToTensorPadsToMultiple) {
  GrayImage img(40, 33, 192);
  const auto t = image_to_tensor<float>(img);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 64, 64}));
  EXPECT_EQ(t(0, 0, 0, 0), 1.0f);
  EXPECT_EQ(t(0, 0, 32, 39), 1.0f);
  EXPECT_EQ(t(0, 0, 33, 0), 0.0f);
  EXPECT_EQ(t(0, 0, 0, 40), 0.0f);
}

TEST(Image, ResizeShorterEdge) {
  GrayImage img(200, 100, 50);
  GrayImage out;
  const double scale = resize_shorter_edge(img, 160, out);
  EXPECT_DOUBLE_EQ(scale, 1.6);
  EXPECT_EQ(out.width, 320);
  EXPECT_EQ(out.height, 160);
  for (auto p : out.pixels) EXPECT_EQ(p, 50);
}

TEST(Checkpoint, StreamRoundTripPreservesBits) {
  std::vector<NamedArray> records{
      {"a", {2, 3}, {1.5f, -0.0f, std::numeric_limits<float>::denorm_min(), 3e38f, -7.25f, 0.1f}},
      {"empty", {0}, {}},
      {"\xc3\xa9t\xc3\xa9", {1}, {42.0f}}};
  const auto path = temp_file("ckpt.bin");
  save_checkpoint(path, records);
  const auto back = load_checkpoint(path);
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(back[i].name, records[i].name);
    EXPECT_EQ(back[i].dims, records[i].dims);
    ASSERT_EQ(back[i].data.size(), records[i].data.size());
    for (std::size_t k = 0; k < back[i].data.size(); ++k) {
      EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i].data[k]), std::bit_cast<std::uint32_t>(records[i].data[k]));
    }
  }
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  std::vector<NamedArray> records{{"w", {4}, {1, 2, 3, 4}}};
  std::stringstream ss;
  write_checkpoint(ss, records);
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream cut(bytes);
  EXPECT_THROW((void)read_checkpoint(cut), FormatError);
}
