#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mqret/error.hpp"

namespace mqret {

// ---- fingerprints -------------------------------------------------------

// FNV-1a 64-bit over raw bytes; the staleness guard used by every artifact.
class Fingerprint {
 public:
  void update(const void* bytes, std::size_t n);
  void update_string(const std::string& s) { update(s.data(), s.size()); }
  void update_u64(std::uint64_t v);
  void update_f64(double v);
  void update_f64s(const std::vector<double>& v);
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::string fingerprint_hex(std::uint64_t fp);
std::uint64_t parse_fingerprint_hex(const std::string& s);

// ---- little-endian binary io -------------------------------------------

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(const std::vector<double>& v);
  void u32s(const std::vector<std::uint32_t>& v);
  void bytes(const void* p, std::size_t n);
  void text(const std::string& s);  // u64 length + raw bytes
  void close();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::vector<double> f64s(std::size_t n);
  std::vector<std::uint32_t> u32s(std::size_t n);
  void bytes(void* p, std::size_t n);
  std::string text();
  std::size_t offset() const { return offset_; }
  bool at_eof();
  void expect_eof(const char* what);

 private:
  std::ifstream in_;
  std::filesystem::path path_;
  std::size_t offset_ = 0;
  [[noreturn]] void truncated(const char* what) const;
  const char* context_ = nullptr;
};

// ---- key=value config text ----------------------------------------------

// Plain key=value files with [section] headers. Keys are flattened to
// "section.key". Blank lines and lines starting with '#' are skipped.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> load_kv_file(const std::filesystem::path& path);
std::string render_kv_text(const std::map<std::string, std::string>& kv);

double kv_get_f64(const std::map<std::string, std::string>& kv, const std::string& key,
                  double fallback);
std::int64_t kv_get_i64(const std::map<std::string, std::string>& kv, const std::string& key,
                        std::int64_t fallback);
std::string kv_get(const std::map<std::string, std::string>& kv, const std::string& key,
                   const std::string& fallback);

// ---- worker parallelism ---------------------------------------------------

// Worker cap from MQRET_THREADS (default 1). Chunks are assigned statically
// and results must be written to disjoint slots, so output is identical for
// any thread count.
int worker_threads();
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace mqret
