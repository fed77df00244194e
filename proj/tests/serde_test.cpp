#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cgmf/container.hpp"
#include "cgmf/pipeline.hpp"
#include "cgmf/serde.hpp"
#include "test_support.hpp"

namespace cgmf::io {
namespace {

using testing::TempDir;
using testing::tiny_config;

std::vector<std::byte> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto b = std::as_bytes(std::span(raw));
  return {b.begin(), b.end()};
}

void write_bytes(const std::filesystem::path& p, std::span<const std::byte> bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Hand-assembled image: magic, u64 little-endian header length, header, blob.
std::vector<std::byte> image(const std::string& header, const std::vector<std::uint8_t>& blob) {
  std::vector<std::byte> out;
  for (char c : std::string("CGMFTNSR")) out.push_back(std::byte(c));
  std::uint64_t n = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(std::byte((n >> (8 * i)) & 0xff));
  for (char c : header) out.push_back(std::byte(c));
  for (auto b : blob) out.push_back(std::byte(b));
  return out;
}

std::vector<std::byte> flip_version(std::vector<std::byte> bytes, int version) {
  const auto c = TensorContainer::parse(bytes);
  auto header = nlohmann::json::parse(c.header_text());
  header["format_version"] = version;
  const auto blob_start = 16 + c.header_text().size();
  std::vector<std::uint8_t> blob;
  for (std::size_t i = blob_start; i < bytes.size(); ++i) blob.push_back(std::to_integer<std::uint8_t>(bytes[i]));
  return image(header.dump(), blob);
}

TEST(Container, HandBuiltImageDecodes) {
  // 1.0 as little-endian f64 and -2.0 as little-endian f32.
  const std::string header = R"({"format_version":1,"attributes":{"k":"v"},"tensors":{
      "a":{"dtype":"f64","shape":[1],"byte_offset":0,"byte_length":8},
      "b":{"dtype":"f32","shape":[1,1],"byte_offset":8,"byte_length":4}}})";
  const auto c = TensorContainer::parse(image(header, {0, 0, 0, 0, 0, 0, 0xf0, 0x3f, 0, 0, 0, 0xc0}));
  EXPECT_EQ(c.values<double>("a"), std::vector<double>{1.0});
  EXPECT_EQ(c.values<double>("b"), std::vector<double>{-2.0});
  EXPECT_EQ(c.attributes()["k"], "v");
}

TEST(Container, LayoutErrors) {
  const std::string gap = R"({"format_version":1,"tensors":{
      "a":{"dtype":"f32","shape":[1],"byte_offset":4,"byte_length":4}}})";
  EXPECT_THROW(TensorContainer::parse(image(gap, {0, 0, 0, 0, 0, 0, 0, 0})), CorruptionError);
  const std::string ok = R"({"format_version":1,"tensors":{
      "a":{"dtype":"f32","shape":[1],"byte_offset":0,"byte_length":4}}})";
  EXPECT_THROW(TensorContainer::parse(image(ok, {0, 0, 0, 0, 9})), CorruptionError);
  EXPECT_THROW(TensorContainer::parse(image(ok, {0, 0, 0})), CorruptionError);
  const std::string wrong_len = R"({"format_version":1,"tensors":{
      "a":{"dtype":"f64","shape":[1],"byte_offset":0,"byte_length":4}}})";
  EXPECT_THROW(TensorContainer::parse(image(wrong_len, {0, 0, 0, 0})), CorruptionError);
  EXPECT_THROW(TensorContainer::parse(image("{not json", {})), CorruptionError);
  auto bad_magic = image(ok, {0, 0, 0, 0});
  bad_magic[0] = std::byte('X');
  EXPECT_THROW(TensorContainer::parse(bad_magic), CorruptionError);
}

TEST(Container, UnknownVersionRejected) {
  TensorContainer c;
  const std::vector<double> v{1, 2, 3};
  c.add<double>("x", v, {3}, DType::f64);
  const auto bytes = c.serialize();
  EXPECT_NO_THROW(TensorContainer::parse(flip_version(bytes, 1)));
  EXPECT_THROW(TensorContainer::parse(flip_version(bytes, 2)), SchemaError);
}

TEST(Container, EveryTruncationDetected) {
  const auto c = tiny_config();
  const auto bytes = weights_container(init_weights<double>(c, 1)).serialize();
  for (std::size_t n = 0; n < bytes.size(); ++n)
    EXPECT_THROW(TensorContainer::parse(std::span(bytes).first(n)), CorruptionError) << "prefix " << n;
}

TEST(Container, TruncatedFileOnDisk) {
  TempDir dir;
  const auto c = tiny_config();
  save_weights(init_weights<double>(c, 1), dir / "w.bin");
  auto bytes = read_bytes(dir / "w.bin");
  bytes.resize(bytes.size() - 3);
  write_bytes(dir / "cut.bin", bytes);
  EXPECT_THROW(load_weights<double>(dir / "cut.bin", c), CorruptionError);
  EXPECT_THROW(load_weights<double>(dir / "absent.bin", c), IoError);
}

TEST(Weights, RoundTripIsBitIdentical) {
  TempDir dir;
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = testing::random_config(rng);
    auto w = init_weights<double>(c, trial);
    save_weights(w, dir / "w.bin");
    auto back = load_weights<double>(dir / "w.bin", c);
    auto a = parameter_views(w);
    auto b = parameter_views(back);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      ASSERT_EQ(a[i].values.size(), b[i].values.size());
      EXPECT_EQ(std::memcmp(a[i].values.data(), b[i].values.data(), a[i].values.size() * sizeof(double)), 0)
          << a[i].name;
    }
  }
}

TEST(Weights, ResaveIsByteIdentical) {
  TempDir dir;
  save_weights(init_weights<double>(tiny_config(), 3), dir / "a.bin");
  TensorContainer::load(dir / "a.bin").save(dir / "b.bin");
  EXPECT_EQ(read_bytes(dir / "a.bin"), read_bytes(dir / "b.bin"));
}

TEST(Weights, TensorNames) {
  const auto c = tiny_config();
  const auto cont = weights_container(init_weights<double>(c, 0));
  std::vector<std::string> names;
  for (const auto& t : cont.tensors()) names.push_back(t.name);
  const std::vector<std::string> expected{
      "ln_v.gain",        "ln_v.shift",       "ln_s.gain",        "ln_s.shift",      "p_q.weight",
      "p_q.bias",         "p_k.weight",       "p_k.bias",         "p_v.weight",      "p_v.bias",
      "p_c.weight",       "p_c.bias",         "geo_mlp.0.weight", "geo_mlp.0.bias",  "geo_mlp.1.weight",
      "geo_mlp.1.bias",   "tw_mlp.0.weight",  "tw_mlp.0.bias",    "tw_mlp.1.weight", "tw_mlp.1.bias",
      "p_o.weight",       "p_o.bias",         "ln_o.gain",        "ln_o.shift",      "p_l.weight",
      "p_l.bias",         "p_g1.weight",      "p_g1.bias",        "p_g2.weight",     "p_g2.bias"};
  EXPECT_EQ(names, expected);
  EXPECT_EQ(cont.at("geo_mlp.0.weight").shape, (std::vector<std::size_t>{12, 4}));
  EXPECT_EQ(cont.at("p_l.weight").shape, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(cont.at("tw_mlp.1.bias").shape, (std::vector<std::size_t>{1}));
}

TEST(Weights, ShapeMismatchNamesTensor) {
  TempDir dir;
  auto c = tiny_config();
  save_weights(init_weights<double>(c, 0), dir / "w.bin");
  c.d_visual = 10;
  try {
    load_weights<double>(dir / "w.bin", c);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("ln_v.gain"), std::string::npos) << e.what();
  }
}

TEST(Weights, MissingTensorNamed) {
  const auto c = tiny_config();
  const auto full = weights_container(init_weights<double>(c, 0));
  TensorContainer partial;
  partial.attributes() = full.attributes();
  for (const auto& t : full.tensors())
    if (t.name != "p_g2.bias") partial.add<double>(t.name, full.values<double>(t.name), t.shape, DType::f64);
  try {
    weights_from_container<double>(partial, c);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("p_g2.bias"), std::string::npos) << e.what();
  }
}

TEST(Weights, ExtraTensorStrictVersusPermissive) {
  const auto c = tiny_config();
  auto cont = weights_container(init_weights<double>(c, 0));
  const std::vector<double> junk{1, 2};
  cont.add<double>("adapter.weight", junk, {2}, DType::f64);
  try {
    weights_from_container<double>(cont, c);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("adapter.weight"), std::string::npos);
  }
  EXPECT_NO_THROW(weights_from_container<double>(cont, c, LoadMode::permissive));
}

TEST(Weights, WrongKindRejected) {
  TensorContainer cont;
  cont.attributes()["kind"] = kTokensKind;
  EXPECT_THROW(weights_from_container<double>(cont, tiny_config()), SchemaError);
}

TEST(Weights, Float32WideningIsExact) {
  const auto c = tiny_config();
  auto w = init_weights<double>(c, 4);
  const auto cont = weights_container(w, DType::f32);
  auto back = weights_from_container<double>(TensorContainer::parse(cont.serialize()), c);
  auto a = parameter_views(w);
  auto b = parameter_views(back);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].values.size(); ++j)
      EXPECT_EQ(b[i].values[j], static_cast<double>(static_cast<float>(a[i].values[j]))) << a[i].name;
  EXPECT_EQ(cont.at("p_q.weight").payload.size(), 8u * 4u * 4u);
}

TEST(Inputs, RoundTrip) {
  TempDir dir;
  const auto c = tiny_config();
  const auto in = pipeline::synth_tokens<double>(c, 9);
  save_inputs(in, dir / "x.bin");
  const auto back = load_inputs<double>(dir / "x.bin");
  EXPECT_EQ(back.f_v, in.f_v);
  EXPECT_EQ(back.f_s, in.f_s);
  EXPECT_EQ(back.f_c, in.f_c);
  EXPECT_EQ(back.f_register, in.f_register);
}

TEST(Config, RoundTripAndDefaults) {
  TempDir dir;
  RunConfig rc{tiny_config(), 17};
  rc.fusion.toggles.gate = false;
  save_config(rc, dir / "c.json");
  const auto back = load_config(dir / "c.json");
  EXPECT_EQ(config_to_json(back), config_to_json(rc));
  const auto minimal = config_from_json(
      nlohmann::json::parse(R"({"n_frames":1,"m_visual":2,"m_spatial":3,"d_visual":4,"d_spatial":5,"d_attn":4,"n_heads":2})"));
  EXPECT_EQ(minimal.seed, 0u);
  EXPECT_TRUE(minimal.fusion.toggles.gate);
}

TEST(Config, FieldErrorsNameTheField) {
  auto base = config_to_json({tiny_config(), 0});
  auto expect_field = [](nlohmann::json doc, const std::string& field) {
    try {
      config_from_json(doc);
      ADD_FAILURE() << "accepted " << doc.dump();
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.field(), field) << e.what();
    }
  };
  auto missing = base;
  missing.erase("d_attn");
  expect_field(missing, "d_attn");
  auto negative = base;
  negative["n_frames"] = -1;
  expect_field(negative, "n_frames");
  auto typo = base;
  typo["n_head"] = 2;
  expect_field(typo, "n_head");
  auto toggle = base;
  toggle["toggles"]["gate"] = "yes";
  expect_field(toggle, "toggles.gate");
  auto heads = base;
  heads["n_heads"] = 3;
  expect_field(heads, "n_heads");
}

TEST(Records, ParseAndLineNumbers) {
  std::istringstream good(
      R"({"id":"a","subtask":"obj_count","answer_type":"numerical","prediction":"13","ground_truth":10})"
      "\n\n"
      R"({"id":7,"subtask":"rel_dir","answer_type":"multiple_choice","prediction":"B","ground_truth":"B"})"
      "\n");
  const auto rs = parse_records(good);
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(std::get<double>(rs[0].prediction), 13.0);
  EXPECT_EQ(rs[1].id, "7");

  std::istringstream bad(
      R"({"id":"a","subtask":"x","answer_type":"numerical","prediction":1,"ground_truth":1})"
      "\n"
      R"({"id":"b","subtask":"x","answer_type":"numerical","prediction":1)"
      "\n");
  try {
    parse_records(bad, "recs.jsonl");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("recs.jsonl:2:", 0), 0u) << e.what();
  }
  std::istringstream unknown(R"({"id":"c","subtask":"x","answer_type":"essay","prediction":"a","ground_truth":"a"})");
  EXPECT_THROW(parse_records(unknown), IoError);
}

TEST(Records, ReportJson) {
  const auto rep = metrics::report(testing::vsi_records({1, 1, 1, 1, 0, 0, 0, 0}, 1), metrics::Protocol::vsi);
  const auto j = report_to_json(rep);
  EXPECT_EQ(j["protocol"], "vsi");
  EXPECT_DOUBLE_EQ(j["overall"].get<double>(), 0.5);
  EXPECT_EQ(j["subtasks"].size(), 8u);
}

}  // namespace
}  // namespace cgmf::io
