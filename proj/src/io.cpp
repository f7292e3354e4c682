#include "mqret/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <sstream>
#include <thread>

namespace mqret {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need byte swaps");

// ---- fingerprints -------------------------------------------------------

void Fingerprint::update(const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    hash_ ^= p[i];
    hash_ *= 0x100000001b3ULL;
  }
}

void Fingerprint::update_u64(std::uint64_t v) { update(&v, sizeof v); }

void Fingerprint::update_f64(double v) { update(&v, sizeof v); }

void Fingerprint::update_f64s(const std::vector<double>& v) {
  update(v.data(), v.size() * sizeof(double));
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return std::string(buf);
}

std::uint64_t parse_fingerprint_hex(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorKind::Format, "bad fingerprint string '" + s + "'");
  }
  return v;
}

// ---- binary io ------------------------------------------------------------

BinaryWriter::BinaryWriter(const std::filesystem::path& path)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw Error(ErrorKind::Format, "cannot open '" + path.string() + "' for writing");
}

void BinaryWriter::u32(std::uint32_t v) { bytes(&v, sizeof v); }
void BinaryWriter::u64(std::uint64_t v) { bytes(&v, sizeof v); }
void BinaryWriter::f64(double v) { bytes(&v, sizeof v); }
void BinaryWriter::f64s(const std::vector<double>& v) {
  bytes(v.data(), v.size() * sizeof(double));
}
void BinaryWriter::u32s(const std::vector<std::uint32_t>& v) {
  bytes(v.data(), v.size() * sizeof(std::uint32_t));
}

void BinaryWriter::bytes(const void* p, std::size_t n) {
  out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out_) throw Error(ErrorKind::Format, "write failed on '" + path_.string() + "'");
}

void BinaryWriter::text(const std::string& s) {
  u64(s.size());
  bytes(s.data(), s.size());
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw Error(ErrorKind::Format, "close failed on '" + path_.string() + "'");
}

BinaryReader::BinaryReader(const std::filesystem::path& path)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw Error(ErrorKind::Format, "cannot open '" + path.string() + "' for reading");
}

void BinaryReader::truncated(const char* what) const {
  throw Error(ErrorKind::Format, "'" + path_.string() + "' truncated while reading " +
                                     std::string(what) + " at byte offset " +
                                     std::to_string(offset_));
}

void BinaryReader::bytes(void* p, std::size_t n) {
  in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) truncated(context_ ? context_ : "bytes");
  offset_ += n;
}

std::uint32_t BinaryReader::u32() {
  context_ = "u32";
  std::uint32_t v;
  bytes(&v, sizeof v);
  return v;
}

std::uint64_t BinaryReader::u64() {
  context_ = "u64";
  std::uint64_t v;
  bytes(&v, sizeof v);
  return v;
}

double BinaryReader::f64() {
  context_ = "f64";
  double v;
  bytes(&v, sizeof v);
  return v;
}

std::vector<double> BinaryReader::f64s(std::size_t n) {
  context_ = "f64 array";
  std::vector<double> v(n);
  if (n) bytes(v.data(), n * sizeof(double));
  return v;
}

std::vector<std::uint32_t> BinaryReader::u32s(std::size_t n) {
  context_ = "u32 array";
  std::vector<std::uint32_t> v(n);
  if (n) bytes(v.data(), n * sizeof(std::uint32_t));
  return v;
}

std::string BinaryReader::text() {
  const std::uint64_t n = u64();
  if (n > (1ULL << 32)) {
    throw Error(ErrorKind::Format, "'" + path_.string() + "' declares an implausible string of " +
                                       std::to_string(n) + " bytes at offset " +
                                       std::to_string(offset_));
  }
  context_ = "string";
  std::string s(n, '\0');
  if (n) bytes(s.data(), n);
  return s;
}

bool BinaryReader::at_eof() {
  return in_.peek() == std::char_traits<char>::eof();
}

void BinaryReader::expect_eof(const char* what) {
  if (!at_eof()) {
    throw Error(ErrorKind::Format, "'" + path_.string() + "' has trailing bytes after " +
                                       std::string(what) + " at offset " +
                                       std::to_string(offset_));
  }
}

// ---- key=value config ------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw Error(ErrorKind::Format,
                    "config line " + std::to_string(lineno) + ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::Format,
                  "config line " + std::to_string(lineno) + ": expected key=value, got '" + line +
                      "'");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> load_kv_file(const std::filesystem::path& path) {
  return parse_kv_text(read_text_file(path));
}

std::string render_kv_text(const std::map<std::string, std::string>& kv) {
  // group by section prefix; map iteration keeps this canonical
  std::ostringstream os;
  std::string current_section;
  bool first = true;
  for (const auto& [key, value] : kv) {
    const std::size_t dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (section != current_section) {
      if (!first) os << "\n";
      os << "[" << section << "]\n";
      current_section = section;
    }
    os << name << " = " << value << "\n";
    first = false;
  }
  return os.str();
}

double kv_get_f64(const std::map<std::string, std::string>& kv, const std::string& key,
                  double fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw Error(ErrorKind::Format, "config key '" + key + "' is not a number: '" + it->second +
                                       "'");
  }
}

std::int64_t kv_get_i64(const std::map<std::string, std::string>& kv, const std::string& key,
                        std::int64_t fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stoll(it->second);
  } catch (const std::exception&) {
    throw Error(ErrorKind::Format, "config key '" + key + "' is not an integer: '" + it->second +
                                       "'");
  }
}

std::string kv_get(const std::map<std::string, std::string>& kv, const std::string& key,
                   const std::string& fallback) {
  const auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

// ---- worker parallelism ----------------------------------------------------

int worker_threads() {
  static const int cached = [] {
    const char* env = std::getenv("MQRET_THREADS");
    if (!env || !*env) return 1;
    const int v = std::atoi(env);
    if (v < 1) return 1;
    return v;
  }();
  return cached;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const int workers = worker_threads();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::vector<std::thread> pool;
  pool.reserve(count);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t w = 0; w < count; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += count) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Format, "cannot open '" + path.string() + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Format, "cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error(ErrorKind::Format, "write failed on '" + path.string() + "'");
}

}  // namespace mqret
