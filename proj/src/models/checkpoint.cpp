#include "aegis/models/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace aegis::models {

namespace {

constexpr const char* kMagic = "AEGIS-CONTAINER 1";

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFULL) << (8 * (7 - i));
  return r;
}

bool has_space(const std::string& s) { return s.find_first_of(" \t\r\n") != std::string::npos || s.empty(); }

ag::Shape parse_shape(const std::string& text) {
  ag::Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(part, &pos);
    if (pos != part.size() || v == 0) throw FormatError("container: bad shape '" + text + "'");
    shape.push_back(static_cast<std::size_t>(v));
  }
  if (shape.empty()) throw FormatError("container: empty shape");
  return shape;
}

}  // namespace

const TensorRecord& Container::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("container: no tensor named '" + name + "'");
}

const std::string& Container::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("container: missing metadata key '" + key + "'");
  return it->second;
}

void save_container(const std::filesystem::path& path, const Container& container) {
  std::ostringstream header;
  header << kMagic << '\n';
  for (const auto& [k, v] : container.meta) {
    if (has_space(k) || v.find('\n') != std::string::npos) throw FormatError("container: invalid metadata key/value '" + k + "'");
    header << "meta " << k << ' ' << v << '\n';
  }
  std::size_t offset = 0;
  for (const auto& t : container.tensors) {
    if (has_space(t.name)) throw FormatError("container: invalid tensor name '" + t.name + "'");
    if (ag::numel_of(t.shape) != t.data.size()) throw FormatError("container: tensor '" + t.name + "' size mismatch");
    header << "tensor " << t.name << ' ';
    for (std::size_t i = 0; i < t.shape.size(); ++i) header << (i ? "," : "") << t.shape[i];
    header << ' ' << offset << ' ' << t.data.size() << '\n';
    offset += t.data.size();
  }
  header << "end\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("container: cannot open '" + path.string() + "' for writing");
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& t : container.tensors) {
    for (double v : t.data) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
      char bytes[8];
      std::memcpy(bytes, &bits, 8);
      out.write(bytes, 8);
    }
  }
  if (!out) throw std::runtime_error("container: write failed for '" + path.string() + "'");
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("container: cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw FormatError("container: bad magic in '" + path.string() + "'");

  Container c;
  struct Pending {
    std::size_t offset, count;
  };
  std::vector<Pending> pending;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      c.meta[key] = value;
    } else if (kind == "tensor") {
      TensorRecord rec;
      std::string shape_text;
      Pending p{};
      if (!(ls >> rec.name >> shape_text >> p.offset >> p.count)) throw FormatError("container: malformed line '" + line + "'");
      rec.shape = parse_shape(shape_text);
      if (ag::numel_of(rec.shape) != p.count) throw FormatError("container: tensor '" + rec.name + "' count/shape mismatch");
      c.tensors.push_back(std::move(rec));
      pending.push_back(p);
    } else {
      throw FormatError("container: unknown manifest line '" + line + "'");
    }
  }
  if (!ended) throw FormatError("container: manifest not terminated in '" + path.string() + "'");

  const auto payload_start = in.tellg();
  in.seekg(0, std::ios::end);
  const auto payload_bytes = static_cast<std::size_t>(in.tellg() - payload_start);
  in.seekg(payload_start);
  std::size_t expected = 0;
  for (const auto& p : pending) expected = std::max(expected, p.offset + p.count);
  if (payload_bytes != expected * 8) {
    throw FormatError("container: payload of " + std::to_string(payload_bytes) + " bytes, expected " +
                      std::to_string(expected * 8));
  }
  std::vector<char> raw(payload_bytes);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) throw FormatError("container: truncated payload");
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    auto& data = c.tensors[i].data;
    data.resize(pending[i].count);
    for (std::size_t j = 0; j < data.size(); ++j) {
      std::uint64_t bits;
      std::memcpy(&bits, raw.data() + (pending[i].offset + j) * 8, 8);
      data[j] = std::bit_cast<double>(to_little(bits));
    }
  }
  return c;
}

Container container_from_store(const ag::ParameterStore& store) {
  Container c;
  for (const auto& e : store.entries()) {
    auto d = e.param.data();
    c.tensors.push_back({e.name, e.param.shape(), std::vector<double>(d.begin(), d.end())});
  }
  return c;
}

void load_store_values(ag::ParameterStore& store, const Container& container) {
  for (auto& e : store.entries()) {
    const auto& rec = container.find(e.name);
    if (rec.shape != e.param.shape()) {
      throw FormatError("checkpoint: shape mismatch for '" + e.name + "': file " + ag::shape_str(rec.shape) + " vs model " +
                        ag::shape_str(e.param.shape()));
    }
    auto dst = e.param.mutable_data();
    std::copy(rec.data.begin(), rec.data.end(), dst.begin());
  }
}

}  // namespace aegis::models
