#include <doctest.h>

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "mmseg/binary_io.hpp"
#include "mmseg/checkpoint.hpp"
#include "mmseg/config.hpp"
#include "mmseg/dataset.hpp"
#include "mmseg/volume.hpp"
#include "support.hpp"

using namespace mmseg;
namespace fs = std::filesystem;
using testing_support::random_labels;
using testing_support::random_tensor;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("mmseg_data_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

std::uint32_t le32(const std::vector<char>& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b[at + std::size_t(i)])) << (8 * i);
  return v;
}

template <typename F>
FormatErrc format_code(F&& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.code();
  }
  FAIL("expected a format error");
  return FormatErrc::invalid_content;
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.encoder_channels = {2, 3, 3, 4};
  cfg.input_height = cfg.input_width = 16;
  cfg.seed = 21;
  return cfg;
}

// Independent reader of the checkpoint layout: name -> (shape, values).
std::vector<std::pair<std::string, TensorF>> parse_checkpoint_bytes(const std::vector<char>& b, std::string& config_text) {
  REQUIRE(std::memcmp(b.data(), "MMCK", 4) == 0);
  REQUIRE(le32(b, 4) == 1);
  const std::uint32_t len = le32(b, 8);
  config_text.assign(b.data() + 12, len);
  std::size_t at = 12 + len;
  std::vector<std::pair<std::string, TensorF>> out;
  while (at < b.size()) {
    const std::uint32_t n = le32(b, at);
    std::string name(b.data() + at + 4, n);
    at += 4 + n;
    const std::uint32_t rank = le32(b, at);
    at += 4;
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d, at += 4) shape.push_back(le32(b, at));
    TensorF t(shape);
    for (Index i = 0; i < t.size(); ++i, at += 4) {
      const std::uint32_t bits = le32(b, at);
      std::memcpy(&t[i], &bits, 4);
    }
    out.emplace_back(name, t);
  }
  CHECK(at == b.size());
  return out;
}

}  // namespace

TEST_CASE("MMV1 volumes") {
  TempDir dir;
  std::mt19937_64 rng(1);

  SUBCASE("modal round trip is bit-exact") {
    MultiModalVolume v{random_tensor<float>({4, 8, 16, 16}, rng)};
    v.data[3] = -0.0f;
    v.data[7] = std::numeric_limits<float>::denorm_min();
    write_volume(dir.file("a.mmv"), v);
    const auto back = read_modal_volume(dir.file("a.mmv"));
    REQUIRE(back.data.shape() == v.data.shape());
    CHECK(std::memcmp(back.data.data(), v.data.data(), std::size_t(v.data.size()) * 4) == 0);
  }
  SUBCASE("label round trip") {
    LabelVolume v{random_labels({5, 16, 16}, 5, rng)};
    write_volume(dir.file("l.mmv"), v);
    CHECK(read_label_volume(dir.file("l.mmv")).labels == v.labels);
    CHECK(std::holds_alternative<LabelVolume>(read_volume(dir.file("l.mmv"))));
  }
  SUBCASE("byte layout") {
    MultiModalVolume v{TensorF({2, 1, 1, 3}, {1.0f, 2.0f, 3.0f, -1.5f, 0.25f, 8.0f})};
    write_volume(dir.file("tiny.mmv"), v);
    const auto b = slurp(dir.file("tiny.mmv"));
    REQUIRE(b.size() == 21 + 6 * 4);
    CHECK(std::memcmp(b.data(), "MMV1", 4) == 0);
    CHECK(le32(b, 4) == 2);
    CHECK(le32(b, 8) == 1);
    CHECK(le32(b, 12) == 1);
    CHECK(le32(b, 16) == 3);
    CHECK(b[20] == 0);
    for (int i = 0; i < 6; ++i) {
      float f;
      const std::uint32_t bits = le32(b, 21 + 4 * std::size_t(i));
      std::memcpy(&f, &bits, 4);
      CHECK(f == v.data[i]);
    }
    LabelVolume l{LabelTensor({1, 2, 2}, {0, 4, 2, 1})};
    write_volume(dir.file("tiny_l.mmv"), l);
    const auto lb = slurp(dir.file("tiny_l.mmv"));
    REQUIRE(lb.size() == 25);
    CHECK(lb[20] == 1);
    CHECK(lb[22] == 4);
  }
  SUBCASE("header arithmetic for a full-size scan") {
    VolumeHeader h{4, 155, 240, 240, VolumeDtype::float32};
    CHECK(h.payload_bytes() == std::uint64_t(4) * 155 * 240 * 240 * 4);
    CHECK(VolumeHeader::kBytes + h.payload_bytes() == 142848021u);
    h.dtype = VolumeDtype::label8;
    h.channels = 1;
    CHECK(h.payload_bytes() == std::uint64_t(155) * 240 * 240);
  }
  SUBCASE("corruption is detected with distinct codes") {
    MultiModalVolume v{random_tensor<float>({4, 2, 4, 4}, rng)};
    write_volume(dir.file("v.mmv"), v);
    const auto good = slurp(dir.file("v.mmv"));

    auto cut = good;
    cut.pop_back();
    spit(dir.file("cut.mmv"), cut);
    CHECK(format_code([&] { read_volume(dir.file("cut.mmv")); }) == FormatErrc::truncated);
    try {
      read_volume(dir.file("cut.mmv"));
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("truncated payload") != std::string::npos);
    }

    auto header_only = std::vector<char>(good.begin(), good.begin() + 10);
    spit(dir.file("short.mmv"), header_only);
    CHECK(format_code([&] { read_volume(dir.file("short.mmv")); }) == FormatErrc::truncated);

    auto magic = good;
    magic[3] = '2';
    spit(dir.file("magic.mmv"), magic);
    CHECK(format_code([&] { read_volume(dir.file("magic.mmv")); }) == FormatErrc::bad_magic);

    auto dtype = good;
    dtype[20] = 7;
    spit(dir.file("dtype.mmv"), dtype);
    CHECK(format_code([&] { read_volume(dir.file("dtype.mmv")); }) == FormatErrc::unknown_dtype);

    auto extra = good;
    extra.push_back(0);
    spit(dir.file("extra.mmv"), extra);
    CHECK(format_code([&] { read_volume(dir.file("extra.mmv")); }) == FormatErrc::trailing_data);
  }
  SUBCASE("kind mismatches and missing files") {
    write_volume(dir.file("img.mmv"), MultiModalVolume{TensorF({4, 1, 2, 2})});
    CHECK(format_code([&] { read_label_volume(dir.file("img.mmv")); }) == FormatErrc::invalid_content);
    CHECK_THROWS_AS(read_volume(dir.file("absent.mmv")), IoError);
  }
  SUBCASE("writes leave no partial file behind") {
    write_volume(dir.file("done.mmv"), LabelVolume{LabelTensor({1, 2, 2})});
    CHECK(fs::exists(dir.file("done.mmv")));
    CHECK_FALSE(fs::exists(dir.file("done.mmv.partial")));
  }
}

TEST_CASE("label validation") {
  CHECK_NOTHROW(validate_labels(LabelTensor({3}, {0, 4, 2})));
  CHECK(format_code([] { validate_labels(LabelTensor({3}, {0, 5, 2})); }) == FormatErrc::invalid_content);
}

TEST_CASE("z-score normalization") {
  std::mt19937_64 rng(2);
  MultiModalVolume v{random_tensor<float>({4, 3, 8, 8}, rng, 3.0)};
  v.data.array() += 5.0f;
  zscore_normalize(v);
  const Index len = v.data.size() / 4;
  for (Index m = 0; m < 4; ++m) {
    const auto seg = v.data.array().segment(m * len, len).cast<double>();
    CHECK(std::abs(seg.mean()) <= 1e-5);
    CHECK(std::abs((seg - seg.mean()).square().mean() - 1.0) <= 1e-4);
  }
}

TEST_CASE("synthetic phantoms") {
  SUBCASE("same seed gives a bit-identical pair, another seed does not") {
    const auto a = gen_synthetic_case(5, 16, 32, 32), b = gen_synthetic_case(5, 16, 32, 32);
    const auto c = gen_synthetic_case(6, 16, 32, 32);
    CHECK(a.image.data == b.image.data);
    CHECK(a.labels.labels == b.labels.labels);
    CHECK_FALSE(a.labels.labels == c.labels.labels);
  }
  SUBCASE("too small is an error") { CHECK_THROWS_AS(gen_synthetic_case(1, 15, 32, 32), UsageError); }

  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    CAPTURE(seed);
    const auto s = gen_synthetic_case(seed, 32, 64, 64);
    const auto& lab = s.labels.labels;
    std::array<Index, 5> hist{};
    for (Index i = 0; i < lab.size(); ++i) ++hist[lab[i]];

    // label histogram: background dominant, every tumor class present
    CHECK(double(hist[0]) > 0.8 * double(lab.size()));
    for (int c = 1; c < 5; ++c) CHECK(hist[std::size_t(c)] > 0);

    // tumor fraction of brain voxels, with the brain counted from its ellipsoid
    Index brain = 0, tumor = 0, outside_brain = 0, outside_tumors = 0, inside_tumors = 0;
    double t1c_sum[5] = {}, t1c_sq[5] = {};
    Index t1c_n[5] = {};
    const Index plane = 64 * 64, voxels = lab.size();
    for (Index z = 0; z < 32; ++z)
      for (Index y = 0; y < 64; ++y)
        for (Index x = 0; x < 64; ++x) {
          const Index i = z * plane + y * 64 + x;
          const bool in_brain = s.brain.rho(double(z), double(y), double(x)) <= 1.0;
          brain += in_brain;
          tumor += lab[i] > 0;
          bool inside = false;
          for (const auto& t : s.tumors) inside |= t.rho(double(z), double(y), double(x)) <= 1.0;
          // nesting: tumor voxels lie in the brain and inside an edema ellipsoid, other brain voxels outside all
          if (lab[i] > 0) {
            outside_brain += !in_brain;
            outside_tumors += !inside;
          } else if (in_brain) {
            inside_tumors += inside;
          }
          if (lab[i] == 0 && !in_brain) continue;
          const double v = s.image.data[3 * voxels + i];
          t1c_sum[lab[i]] += v;
          t1c_sq[lab[i]] += v * v;
          ++t1c_n[lab[i]];
        }
    CHECK(brain == s.brain_voxels);
    CHECK(outside_brain == 0);
    CHECK(outside_tumors == 0);
    CHECK(inside_tumors == 0);
    const double fraction = double(tumor) / double(brain);
    CHECK(fraction >= 0.01);
    CHECK(fraction <= 0.10);
    CHECK(s.tumors.size() >= 1);
    CHECK(s.tumors.size() <= 3);

    // enhancing core is bright in T1c: margin over normal tissue of at least twice the noise
    const double sigma = PhantomOptions{}.noise_sigma;
    const double mean4 = t1c_sum[4] / double(t1c_n[4]), mean0 = t1c_sum[0] / double(t1c_n[0]);
    CHECK(mean4 - mean0 >= 2 * sigma);
    // edema is bright in FLAIR
    double flair_edema = 0, flair_normal = 0;
    Index ne = 0, nn = 0;
    for (Index i = 0; i < voxels; ++i) {
      if (lab[i] == 1) flair_edema += s.image.data[i], ++ne;
      if (lab[i] == 0 && s.image.data[i] > 0.5f) flair_normal += s.image.data[i], ++nn;
    }
    CHECK(flair_edema / double(ne) - flair_normal / double(nn) >= 2 * sigma);
  }
}

TEST_CASE("extract_sequences") {
  std::mt19937_64 rng(3);
  const MultiModalVolume vol{random_tensor<float>({4, 6, 5, 7}, rng)};
  const LabelVolume lab{random_labels({6, 5, 7}, 5, rng)};

  SUBCASE("tiling with stride T") {
    const auto seqs = extract_sequences(vol, lab, 3, 3);
    REQUIRE(seqs.size() == 2);
    CHECK(seqs[0].start == 0);
    CHECK(seqs[1].start == 3);
  }
  SUBCASE("stride 1 gives D - T + 1 windows") {
    for (Index t = 1; t <= 6; ++t) CHECK(extract_sequences(vol, lab, t, 1).size() == std::size_t(6 - t + 1));
  }
  SUBCASE("stride that does not divide leaves no window past the end") {
    const auto seqs = extract_sequences(vol, lab, 4, 3);
    REQUIRE(seqs.size() == 1);
    CHECK(seqs[0].start == 0);
  }
  SUBCASE("content equals direct slicing") {
    for (const auto& s : extract_sequences(vol, lab, 3, 2)) {
      REQUIRE(s.length() == 3);
      for (Index t = 0; t < 3; ++t) {
        const Index z = s.start + t;
        for (Index m = 0; m < 4; ++m)
          for (Index y = 0; y < 5; ++y)
            for (Index x = 0; x < 7; ++x) CHECK(s.stacks[std::size_t(t)](m, y, x) == vol.data(m, z, y, x));
        for (Index y = 0; y < 5; ++y)
          for (Index x = 0; x < 7; ++x) CHECK(s.labels[std::size_t(t)](y, x) == lab.labels(z, y, x));
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS(extract_sequences(vol, lab, 7, 1));
    CHECK_THROWS(extract_sequences(vol, lab, 3, 0));
    CHECK_THROWS(extract_sequences(vol, LabelVolume{LabelTensor({6, 5, 6})}, 3, 1));
  }
  SUBCASE("has_tumor") {
    const LabelVolume empty{LabelTensor({6, 5, 7})};
    for (const auto& s : extract_sequences(vol, empty, 3, 1)) CHECK_FALSE(s.has_tumor());
    LabelVolume one = empty;
    one.labels(4, 2, 2) = 3;
    const auto seqs = extract_sequences(vol, one, 3, 1);
    for (const auto& s : seqs) CHECK(s.has_tumor() == (s.start <= 4 && 4 < s.start + 3));
  }
}

TEST_CASE("MMCK checkpoints") {
  TempDir dir;
  const auto cfg = small_model();
  auto params = init_params<float>(cfg);
  std::mt19937_64 rng(4);
  params.visit([&](const std::string&, TensorF& t, TensorRole) { t = random_tensor<float>(t.shape(), rng); });
  params.visit([&](const std::string& name, TensorF& t, TensorRole) {
    if (name.find("running_var") != std::string::npos) t.array() = t.array().abs() + 0.5f;
  });

  SUBCASE("round trip is bit-exact for every tensor and the config") {
    save_checkpoint(dir.file("m.mmck"), params, cfg);
    const auto ck = load_checkpoint(dir.file("m.mmck"));
    CHECK(ck.config == cfg);
    std::vector<std::pair<std::string, TensorF>> a, b;
    params.visit([&](const std::string& n, const TensorF& t, TensorRole) { a.emplace_back(n, t); });
    ck.params.visit([&](const std::string& n, const TensorF& t, TensorRole) { b.emplace_back(n, t); });
    CHECK(a == b);
  }
  SUBCASE("byte layout follows the documented format") {
    const auto bytes = encode_checkpoint(params, cfg);
    std::string text;
    const auto parsed = parse_checkpoint_bytes(bytes, text);
    CHECK(text == to_text(cfg));
    std::vector<std::pair<std::string, TensorF>> expected;
    params.visit([&](const std::string& n, const TensorF& t, TensorRole) { expected.emplace_back(n, t); });
    CHECK(parsed == expected);
  }
  SUBCASE("eval forward after load equals the original bit-exactly") {
    save_checkpoint(dir.file("m.mmck"), params, cfg);
    const auto ck = load_checkpoint(dir.file("m.mmck"));
    std::vector<TensorF> seq;
    for (int t = 0; t < 3; ++t) seq.push_back(random_tensor<float>({4, 16, 16}, rng));
    CHECK(forward(ck.params, ck.config, seq) == forward(params, cfg, seq));
  }
  SUBCASE("errors carry distinct codes") {
    const auto good = encode_checkpoint(params, cfg);
    auto magic = good;
    magic[0] = 'X';
    CHECK(format_code([&] { decode_checkpoint(magic); }) == FormatErrc::bad_magic);
    CHECK(format_code([&] { decode_checkpoint(std::vector<char>{'M', 'M'}); }) == FormatErrc::bad_magic);

    auto version = good;
    version[4] = 2;
    CHECK(format_code([&] { decode_checkpoint(version); }) == FormatErrc::version_mismatch);

    for (std::size_t cut : {std::size_t(6), std::size_t(14), good.size() - 1, good.size() - 70}) {
      CAPTURE(cut);
      CHECK(format_code([&] { decode_checkpoint(std::vector<char>(good.begin(), good.begin() + std::ptrdiff_t(cut))); }) ==
            FormatErrc::truncated);
    }

    // append a second copy of the first tensor record
    const std::size_t first = 12 + le32(good, 8);
    bin::Writer w;
    const auto& t = params.encoders[0][0].conv.weight;
    const std::string name = "encoder.0.0.conv.weight";
    w.u32(std::uint32_t(name.size()));
    w.str(name);
    w.u32(std::uint32_t(t.rank()));
    for (Index d : t.shape()) w.u32(std::uint32_t(d));
    for (Index i = 0; i < t.size(); ++i) w.f32(t[i]);
    REQUIRE(std::equal(w.buffer().begin(), w.buffer().end(), good.begin() + std::ptrdiff_t(first)));
    auto dup = good;
    dup.insert(dup.end(), w.buffer().begin(), w.buffer().end());
    CHECK(format_code([&] { decode_checkpoint(dup); }) == FormatErrc::name_collision);

    auto other = cfg;
    other.encoder_channels = {2, 3, 4, 4};
    CHECK(format_code([&] { encode_checkpoint(params, other); }) == FormatErrc::config_mismatch);

    // a config text that no longer matches the tensors
    std::string text(good.begin() + 12, good.begin() + std::ptrdiff_t(first));
    const auto pos = text.find("class_count = 5");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 15, "class_count = 4");
    auto wrong = good;
    std::copy(text.begin(), text.end(), wrong.begin() + 12);
    CHECK(format_code([&] { decode_checkpoint(wrong); }) == FormatErrc::config_mismatch);

    CHECK_THROWS_AS(load_checkpoint(dir.file("absent.mmck")), IoError);
  }
}

TEST_CASE("case directories") {
  TempDir dir;
  generate_cases(dir.path.string(), 3, 9, 16, 16, 16);
  const auto cases = find_cases(dir.path.string());
  REQUIRE(cases.size() == 3);
  for (std::uint64_t i = 0; i < 3; ++i) {
    CHECK(cases[i].index == i);
    CHECK(fs::path(cases[i].image).filename() == case_image_name(i));
    CHECK(fs::path(cases[i].labels).filename() == case_label_name(i));
  }
  CHECK(case_image_name(2) == "case_2_img.mmv");
  CHECK(case_label_name(2) == "case_2_lbl.mmv");

  SUBCASE("files hold the generator output for the derived seed") {
    const auto expected = gen_synthetic_case(case_seed(9, 1), 16, 16, 16);
    CHECK(read_modal_volume(cases[1].image).data == expected.image.data);
    CHECK(read_label_volume(cases[1].labels).labels == expected.labels.labels);
    CHECK(case_seed(9, 0) != case_seed(9, 1));
    CHECK(case_seed(9, 0) != case_seed(10, 0));
  }
  SUBCASE("load_case z-scores the image") {
    const auto c = load_case(cases[0]);
    CHECK(std::abs(c.image.data.array().segment(0, 16 * 16 * 16).cast<double>().mean()) <= 1e-5);
  }
  SUBCASE("a lone file is an error") {
    fs::remove(cases[2].labels);
    CHECK_THROWS(find_cases(dir.path.string()));
  }
  SUBCASE("mismatched pair shapes are an error") {
    write_volume(cases[0].labels, LabelVolume{LabelTensor({16, 16, 8})});
    CHECK_THROWS(load_case(cases[0]));
  }
  SUBCASE("invalid labels are an error") {
    LabelVolume bad{LabelTensor({16, 16, 16})};
    bad.labels[5] = 9;
    write_volume(cases[0].labels, bad);
    CHECK(format_code([&] { load_case(cases[0]); }) == FormatErrc::invalid_content);
  }
  SUBCASE("an empty directory is an error") {
    TempDir empty;
    CHECK_THROWS(find_cases(empty.path.string()));
  }
}
