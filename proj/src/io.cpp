// SPDX-License-Identifier: Apache-2.0

#include <condnet/io.hpp>

#include <json.hpp>

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace condnet {

using nlohmann::json;

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunManifest::config_hash() const {
  json j;
  j["command"] = command;
  j["seed"] = seed;
  j["precision"] = precision;
  j["config"] = config;
  return fnv1a_hex(j.dump());
}

std::string RunManifest::to_json() const {
  json j;
  j["command"] = command;
  j["seed"] = seed;
  j["precision"] = precision;
  j["engine_version"] = engine_version;
  j["config"] = config;
  j["config_hash"] = config_hash();
  j["outputs"] = outputs;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string &text) {
  try {
    const json j = json::parse(text);
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.precision = j.at("precision").get<std::string>();
    m.engine_version = j.at("engine_version").get<std::string>();
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.outputs = j.value("outputs", std::vector<std::string>{});
    if (j.contains("config_hash") && j["config_hash"].get<std::string>() != m.config_hash())
      throw FormatError("run manifest hash does not match its contents");
    return m;
  } catch (const json::exception &e) {
    throw FormatError(std::string("run manifest: ") + e.what());
  }
}

template <> std::string_view dtype_name<float>() { return "f32"; }
template <> std::string_view dtype_name<double>() { return "f64"; }

namespace {

std::string param_file(const std::string &id) {
  // Ids are node ids plus ".w"; keep the file name portable.
  std::string out;
  for (char c : id)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' ||
            c == '-')
               ? c
               : '_';
  return out + ".bin";
}

void check_against_arch(const ArchSpec &arch, const std::map<std::string, Shape> &shapes,
                        const std::filesystem::path &where) {
  const ArchInfo info = validate(arch);
  std::set<std::string> expected;
  for (const ParamInfo &p : arch_params(arch, info)) {
    expected.insert(p.id);
    auto it = shapes.find(p.id);
    if (it == shapes.end())
      throw FormatError(where.string() + ": missing parameter '" + p.id + "'");
    if (it->second != p.shape)
      throw FormatError(where.string() + ": parameter '" + p.id + "' has shape " +
                        shape_string(it->second) + ", architecture needs " +
                        shape_string(p.shape));
  }
  for (const auto &[id, s] : shapes)
    if (!expected.count(id))
      throw FormatError(where.string() + ": parameter '" + id +
                        "' does not belong to the architecture");
}

} // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path &dir, const ArchSpec &arch,
                     const ParamStore<T> &params, std::size_t iteration) {
  std::map<std::string, Shape> shapes;
  for (const auto &[id, p] : params)
    shapes[id] = p.value.shape();
  check_against_arch(arch, shapes, dir);
  std::filesystem::create_directories(dir);
  json list = json::array();
  for (const auto &[id, p] : params) {
    const std::string file = param_file(id);
    save_tensor(dir / file, p.value);
    list.push_back({{"id", id}, {"file", file}, {"shape", p.value.shape()}});
  }
  json j;
  j["format"] = "condnet-checkpoint";
  j["dtype"] = dtype_name<T>();
  j["iteration"] = iteration;
  j["arch"] = json::parse(arch_to_json(arch));
  j["params"] = list;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

template <typename T> Checkpoint<T> load_checkpoint(const std::filesystem::path &dir) {
  const std::filesystem::path mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath))
    throw FormatError("checkpoint '" + dir.string() + "' has no manifest.json");
  Checkpoint<T> ck;
  try {
    const json j = json::parse(read_text(mpath));
    if (j.value("format", std::string()) != "condnet-checkpoint")
      throw FormatError(mpath.string() + ": not a checkpoint manifest");
    ck.dtype = j.at("dtype").get<std::string>();
    if (ck.dtype != "f32" && ck.dtype != "f64")
      throw FormatError(mpath.string() + ": unknown dtype '" + ck.dtype + "'");
    ck.iteration = j.value("iteration", std::size_t(0));
    ck.arch = arch_from_json(j.at("arch").dump());
    std::map<std::string, Shape> shapes;
    for (const json &p : j.at("params")) {
      const std::string id = p.at("id").get<std::string>();
      Tensor<T> t = load_tensor<T>(dir / p.at("file").get<std::string>());
      if (t.shape() != p.at("shape").get<Shape>())
        throw FormatError(mpath.string() + ": parameter '" + id +
                          "' file shape differs from the manifest");
      shapes[id] = t.shape();
      ck.params.set(id, std::move(t));
    }
    check_against_arch(ck.arch, shapes, dir);
  } catch (const json::exception &e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  return ck;
}

template void save_checkpoint(const std::filesystem::path &, const ArchSpec &,
                              const ParamStore<float> &, std::size_t);
template void save_checkpoint(const std::filesystem::path &, const ArchSpec &,
                              const ParamStore<double> &, std::size_t);
template Checkpoint<float> load_checkpoint(const std::filesystem::path &);
template Checkpoint<double> load_checkpoint(const std::filesystem::path &);

std::string read_text(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ArgumentError("cannot read '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path &path, std::string_view text) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw ArgumentError("cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out)
    throw ArgumentError("write failed for '" + path.string() + "'");
}

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

} // namespace condnet
