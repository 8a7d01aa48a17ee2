// SPDX-License-Identifier: Apache-2.0
#include "hiergan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "hiergan/error.hpp"

namespace hiergan {
namespace {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

constexpr char kMagic[8] = {'H', 'G', 'C', 'K', 'P', 'T', '0', '1'};

std::uint8_t dtype_code(torch::Dtype t) {
  switch (t) {
    case torch::kFloat32: return 1;
    case torch::kFloat64: return 2;
    case torch::kInt64: return 3;
    case torch::kInt32: return 4;
    case torch::kUInt8: return 5;
    case torch::kBool: return 6;
    default: throw InvalidArgument("checkpoint: unsupported tensor dtype");
  }
}

torch::Dtype dtype_from_code(std::uint8_t c) {
  switch (c) {
    case 1: return torch::kFloat32;
    case 2: return torch::kFloat64;
    case 3: return torch::kInt64;
    case 4: return torch::kInt32;
    case 5: return torch::kUInt8;
    case 6: return torch::kBool;
    default: throw std::runtime_error("unknown dtype code " + std::to_string(c));
  }
}

class Writer {
 public:
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void i64(std::int64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf) : buf_(buf) {}
  std::uint8_t u8() { return pod<std::uint8_t>(); }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::int64_t i64() { return pod<std::int64_t>(); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  const char* take(std::size_t n) {
    need(n);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  const char* at(std::size_t p) const { return buf_.data() + p; }

 private:
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw std::runtime_error("unexpected end of data");
  }
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  std::uint64_t h = seed;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

const TensorSection& TensorContainer::section(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.name == name) return s;
  }
  throw IoError("checkpoint: missing section '" + name + "'");
}

bool TensorContainer::has_section(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.name == name) return true;
  }
  return false;
}

void save_container(const fs::path& path, const TensorContainer& container) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(static_cast<std::uint32_t>(container.metadata.size()));
  for (const auto& [k, v] : container.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(container.sections.size()));
  for (const TensorSection& section : container.sections) {
    w.str(section.name);
    const std::size_t start = w.buffer().size();
    w.u32(static_cast<std::uint32_t>(section.tensors.size()));
    for (const NamedTensor& nt : section.tensors) {
      torch::Tensor t = nt.tensor.detach().to(torch::kCPU).contiguous();
      w.str(nt.name);
      w.u8(dtype_code(t.scalar_type()));
      w.u32(static_cast<std::uint32_t>(t.dim()));
      for (int64_t d : t.sizes()) w.i64(d);
      const std::size_t nbytes = t.numel() * t.element_size();
      w.u64(nbytes);
      w.bytes(t.data_ptr(), nbytes);
    }
    const std::size_t end = w.buffer().size();
    w.u64(fnv1a(w.buffer().data() + start, end - start));
  }

  const fs::path tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw IoError("write failed for checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

TensorContainer load_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(buf);
  TensorContainer c;
  std::string where = "header";
  try {
    const char* magic = r.take(sizeof(kMagic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("bad magic");
    where = "metadata";
    const std::uint32_t n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
      std::string k = r.str();
      c.metadata[k] = r.str();
    }
    where = "section table";
    const std::uint32_t n_sections = r.u32();
    for (std::uint32_t s = 0; s < n_sections; ++s) {
      TensorSection section;
      section.name = r.str();
      where = "section '" + section.name + "'";
      const std::size_t start = r.pos();
      const std::uint32_t n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        NamedTensor nt;
        nt.name = r.str();
        const torch::Dtype dtype = dtype_from_code(r.u8());
        const std::uint32_t ndim = r.u32();
        if (ndim > 16) throw std::runtime_error("implausible rank");
        std::vector<int64_t> dims(ndim);
        for (auto& d : dims) {
          d = r.i64();
          if (d < 0) throw std::runtime_error("negative dimension");
        }
        const std::uint64_t nbytes = r.u64();
        torch::Tensor t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
        if (nbytes != static_cast<std::uint64_t>(t.numel() * t.element_size())) {
          throw std::runtime_error("byte count does not match shape for tensor '" + nt.name + "'");
        }
        std::memcpy(t.data_ptr(), r.take(nbytes), nbytes);
        nt.tensor = t;
        section.tensors.push_back(std::move(nt));
      }
      const std::size_t end = r.pos();
      const std::uint64_t expected = r.u64();
      if (fnv1a(r.at(start), end - start) != expected) throw std::runtime_error("checksum mismatch");
      c.sections.push_back(std::move(section));
      where = "section table";
    }
    if (r.pos() != buf.size()) throw std::runtime_error("trailing bytes");
  } catch (const std::exception& e) {
    throw IoError("corrupt checkpoint " + path.string() + " in " + where + ": " + e.what());
  }
  return c;
}

std::vector<NamedTensor> module_tensors(const torch::nn::Module& module) {
  std::vector<NamedTensor> out;
  for (const auto& item : module.named_parameters(true)) out.push_back({item.key(), item.value()});
  for (const auto& item : module.named_buffers(true)) out.push_back({"buffer:" + item.key(), item.value()});
  return out;
}

void load_module_tensors(torch::nn::Module& module, const TensorSection& section) {
  std::vector<NamedTensor> targets = module_tensors(module);
  if (targets.size() != section.tensors.size()) {
    throw IoError("checkpoint section '" + section.name + "' has " + std::to_string(section.tensors.size()) +
                  " tensors, module expects " + std::to_string(targets.size()));
  }
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const NamedTensor& src = section.tensors[i];
    NamedTensor& dst = targets[i];
    if (src.name != dst.name || src.tensor.sizes() != dst.tensor.sizes() ||
        src.tensor.scalar_type() != dst.tensor.scalar_type()) {
      throw IoError("checkpoint section '" + section.name + "': tensor '" + src.name + "' does not match '" +
                    dst.name + "'");
    }
    dst.tensor.copy_(src.tensor);
  }
}

}  // namespace hiergan
