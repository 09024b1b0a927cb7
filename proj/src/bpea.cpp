#include "gocoma/bpea.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <png.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <csetjmp>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "gocoma/binary_io.hpp"
#include "gocoma/errors.hpp"
#include "json.hpp"

extern char** environ;

namespace gocoma::bpea {

namespace fs = std::filesystem;

namespace {

// --- processes ---

class TempDir {
 public:
  TempDir() {
    std::string pattern = (fs::temp_directory_path() / "bpea-XXXXXX").string();
    if (::mkdtemp(pattern.data()) == nullptr) throw IoError("cannot create a temporary directory");
    path_ = pattern;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::optional<fs::path> find_on_path(const std::string& name) {
  if (name.find('/') != std::string::npos) {
    if (::access(name.c_str(), X_OK) == 0) return fs::path(name);
    return std::nullopt;
  }
  const char* env = std::getenv("PATH");
  std::stringstream dirs(env ? env : "/usr/bin:/bin");
  std::string dir;
  while (std::getline(dirs, dir, ':')) {
    const fs::path candidate = fs::path(dir.empty() ? "." : dir) / name;
    if (::access(candidate.c_str(), X_OK) == 0 && fs::is_regular_file(candidate)) return candidate;
  }
  return std::nullopt;
}

struct ProcResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

ProcResult run_process(const std::vector<std::string>& argv, const fs::path& log_file) {
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, 0, "/dev/null", O_RDONLY, 0);
  posix_spawn_file_actions_addopen(&actions, 1, log_file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_adddup2(&actions, 1, 2);
  pid_t pid = 0;
  const int rc = ::posix_spawnp(&pid, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw EnvironmentError("cannot run '" + argv[0] + "': " + std::strerror(rc));

  int status = 0;
  while (::waitpid(pid, &status, 0) < 0)
    if (errno != EINTR) throw EnvironmentError("waitpid failed for '" + argv[0] + "'");
  ProcResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
  std::ifstream in(log_file, std::ios::binary);
  r.output.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

std::string version_line(const std::string& tool) {
  static std::mutex mu;
  static std::map<std::string, std::string> cache;
  std::lock_guard lock(mu);
  if (auto it = cache.find(tool); it != cache.end()) return it->second;
  TempDir tmp;
  const auto r = run_process({tool, "--version"}, tmp.path() / "version.log");
  std::string line = r.output.substr(0, r.output.find('\n'));
  if (line.empty()) line = tool + " (unknown version)";
  return cache[tool] = line;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : " ") + p;
  return out;
}

std::string require_tool(const std::string& tool) {
  if (!find_on_path(tool)) throw EnvironmentError("compiler '" + tool + "' not found on PATH");
  return tool;
}

// --- normalization ---

bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

// Index just past a quoted literal starting at `open` (the quote itself).
// Escapes skip one character; single-line literals stop at a newline.
std::size_t skip_quoted(std::string_view s, std::size_t open, std::string_view quote, bool multiline) {
  std::size_t i = open + quote.size();
  while (i < s.size()) {
    if (s[i] == '\\') {
      i += 2;
      continue;
    }
    if (!multiline && s[i] == '\n') return i;
    if (s.substr(i, quote.size()) == quote) return i + quote.size();
    ++i;
  }
  return s.size();
}

std::string strip_c_family(std::string_view s, Language lang) {
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    const char next = i + 1 < s.size() ? s[i + 1] : '\0';
    if (c == '/' && next == '/') {
      while (i < s.size() && s[i] != '\n') ++i;
      out += ' ';
    } else if (c == '/' && next == '*') {
      const auto end = s.find("*/", i + 2);
      i = end == std::string_view::npos ? s.size() : end + 2;
      out += ' ';
    } else if (lang == Language::cpp && c == 'R' && next == '"' && (i == 0 || !ident_char(s[i - 1]) ||
                                                                    out.ends_with("u8") || out.ends_with("u") ||
                                                                    out.ends_with("U") || out.ends_with("L"))) {
      const auto paren = s.find('(', i + 2);
      if (paren == std::string_view::npos) {
        out += c;
        ++i;
        continue;
      }
      const std::string close = ")" + std::string(s.substr(i + 2, paren - i - 2)) + "\"";
      const auto end = s.find(close, paren + 1);
      i = end == std::string_view::npos ? s.size() : end + close.size();
      out += 'S';
    } else if (lang == Language::java && s.substr(i, 3) == "\"\"\"") {
      i = skip_quoted(s, i, "\"\"\"", true);
      out += 'S';
    } else if (c == '"') {
      i = skip_quoted(s, i, "\"", false);
      out += 'S';
    } else if (c == '\'') {
      // C++14 digit separator: inside a numeric token, followed by a digit.
      std::size_t start = out.size();
      while (start > 0 && ident_char(out[start - 1])) --start;
      const bool in_number = start < out.size() && std::isdigit(static_cast<unsigned char>(out[start]));
      if (lang == Language::cpp && in_number && std::isxdigit(static_cast<unsigned char>(next))) {
        out += c;
        ++i;
      } else {
        i = skip_quoted(s, i, "'", false);
        out += 'S';
      }
    } else {
      out += c;
      ++i;
    }
  }
  return out;
}

std::string strip_python(std::string_view s) {
  static const std::vector<std::string> prefixes{"rb", "br", "fr", "rf", "r", "u", "b", "f"};
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (c == '#') {
      while (i < s.size() && s[i] != '\n') ++i;
      out += ' ';
    } else if (c == '"' || c == '\'') {
      // A string prefix is part of the literal.
      for (const auto& p : prefixes) {
        if (out.size() < p.size()) continue;
        std::string tail = out.substr(out.size() - p.size());
        std::transform(tail.begin(), tail.end(), tail.begin(), [](char ch) { return char(std::tolower(ch)); });
        const bool bounded = out.size() == p.size() || !ident_char(out[out.size() - p.size() - 1]);
        if (tail == p && bounded) {
          out.resize(out.size() - p.size());
          break;
        }
      }
      const std::string triple(3, c);
      if (s.substr(i, 3) == triple) i = skip_quoted(s, i, triple, true);
      else i = skip_quoted(s, i, std::string(1, c), false);
      out += 'S';
    } else {
      out += c;
      ++i;
    }
  }
  return out;
}

std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      pending = !out.empty();
      continue;
    }
    if (pending) out += ' ';
    pending = false;
    out += c;
  }
  return out;
}

// --- png plumbing ---

void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}
void png_flush_noop(png_structp) {}

struct ReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

void png_read_from_span(png_structp png, png_bytep data, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->bytes.size()) png_error(png, "truncated PNG data");
  std::memcpy(data, cur->bytes.data() + cur->pos, len);
  cur->pos += len;
}

void png_silent_warning(png_structp, png_const_charp) {}
[[noreturn]] void png_quiet_error(png_structp png, png_const_charp) { png_longjmp(png, 1); }

}  // namespace

std::string_view to_string(Language lang) {
  switch (lang) {
    case Language::c: return "c";
    case Language::cpp: return "cpp";
    case Language::java: return "java";
    case Language::python: return "python";
  }
  return "?";
}

std::string_view to_string(Origin origin) { return origin == Origin::compiled ? "compiled" : "fallback-normalized"; }

Language parse_language(std::string_view name) {
  if (name == "c") return Language::c;
  if (name == "cpp" || name == "c++") return Language::cpp;
  if (name == "java") return Language::java;
  if (name == "python" || name == "py") return Language::python;
  throw InvalidInput("unknown language '" + std::string(name) + "'");
}

const std::vector<std::string>& extensions(Language lang) {
  static const std::vector<std::string> c{".c"}, cpp{".cpp", ".cc", ".cxx", ".c++"}, java{".java"}, py{".py"};
  switch (lang) {
    case Language::c: return c;
    case Language::cpp: return cpp;
    case Language::java: return java;
    case Language::python: return py;
  }
  return c;
}

CompileOutcome compile_source(const fs::path& source, Language lang, const ToolchainConfig& tc) {
  if (!fs::is_regular_file(source)) throw IoError("cannot read source " + source.string());
  TempDir tmp;
  const fs::path log = tmp.path() / "compile.log";
  std::vector<std::string> argv;
  fs::path product;

  switch (lang) {
    case Language::c:
    case Language::cpp: {
      const std::string& tool = require_tool(lang == Language::c ? tc.cc : tc.cxx);
      product = tmp.path() / "out.o";
      argv = {tool, "-c"};
      const auto& flags = lang == Language::c ? tc.c_flags : tc.cxx_flags;
      argv.insert(argv.end(), flags.begin(), flags.end());
      argv.insert(argv.end(), {"-o", product.string(), source.string()});
      break;
    }
    case Language::java: {
      const std::string& tool = require_tool(tc.javac);
      product = tmp.path() / "classes";
      fs::create_directories(product);
      argv = {tool};
      argv.insert(argv.end(), tc.java_flags.begin(), tc.java_flags.end());
      argv.insert(argv.end(), {"-d", product.string(), source.string()});
      break;
    }
    case Language::python: {
      const std::string& tool = require_tool(tc.python);
      product = tmp.path() / "out.pyc";
      argv = {tool, "-c",
              "import py_compile, sys; py_compile.compile(sys.argv[1], cfile=sys.argv[2], doraise=True, "
              "invalidation_mode=py_compile.PycInvalidationMode.UNCHECKED_HASH)",
              source.string(), product.string()};
      break;
    }
  }

  const auto r = run_process(argv, log);
  CompileOutcome out;
  out.diagnostics = r.output;
  if (r.exit_code != 0) return out;

  BpeaArtifact a;
  a.origin = Origin::compiled;
  a.language = lang;
  if (lang == Language::java) {
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> classes;
    for (const auto& entry : fs::recursive_directory_iterator(product))
      if (entry.is_regular_file() && entry.path().extension() == ".class")
        classes.emplace_back(fs::relative(entry.path(), product).generic_string(), io::read_file(entry.path()));
    if (classes.empty()) return out;
    a.bytes = classes.size() == 1 ? std::move(classes[0].second) : deterministic_zip(std::move(classes));
    a.toolchain_record = version_line(argv[0]) + "; " + join({argv[0]}) +
                         (tc.java_flags.empty() ? "" : " " + join(tc.java_flags)) +
                         (classes.size() > 1 ? "; zipped" : "");
  } else {
    if (!fs::is_regular_file(product)) return out;
    a.bytes = io::read_file(product);
    if (lang == Language::python) {
      a.toolchain_record = version_line(argv[0]) + "; py_compile unchecked-hash";
    } else {
      const auto& flags = lang == Language::c ? tc.c_flags : tc.cxx_flags;
      a.toolchain_record = version_line(argv[0]) + "; " + argv[0] + " -c" + (flags.empty() ? "" : " " + join(flags));
    }
  }
  if (a.bytes.empty()) return out;
  out.artifact = std::move(a);
  return out;
}

std::string lossy_utf8(std::string_view in) {
  std::string out;
  out.reserve(in.size());
  const auto cont = [&](std::size_t i) { return i < in.size() && (static_cast<unsigned char>(in[i]) & 0xC0) == 0x80; };
  std::size_t i = 0;
  while (i < in.size()) {
    const auto b = static_cast<unsigned char>(in[i]);
    std::size_t len = 0;
    if (b < 0x80) len = 1;
    else if (b >= 0xC2 && b <= 0xDF) len = cont(i + 1) ? 2 : 0;
    else if (b >= 0xE0 && b <= 0xEF) {
      const auto b1 = i + 1 < in.size() ? static_cast<unsigned char>(in[i + 1]) : 0;
      const bool ok1 = (b == 0xE0) ? (b1 >= 0xA0 && b1 <= 0xBF) : (b == 0xED) ? (b1 >= 0x80 && b1 <= 0x9F) : cont(i + 1);
      len = ok1 && cont(i + 2) ? 3 : 0;
    } else if (b >= 0xF0 && b <= 0xF4) {
      const auto b1 = i + 1 < in.size() ? static_cast<unsigned char>(in[i + 1]) : 0;
      const bool ok1 = (b == 0xF0) ? (b1 >= 0x90 && b1 <= 0xBF) : (b == 0xF4) ? (b1 >= 0x80 && b1 <= 0x8F) : cont(i + 1);
      len = ok1 && cont(i + 2) && cont(i + 3) ? 4 : 0;
    }
    if (len == 0) {
      out += "\xEF\xBF\xBD";
      ++i;
    } else {
      out.append(in.substr(i, len));
      i += len;
    }
  }
  return out;
}

BpeaArtifact normalize_fallback(std::string_view source, Language lang) {
  const std::string text = lossy_utf8(source);
  const std::string stripped = lang == Language::python ? strip_python(text) : strip_c_family(text, lang);
  const std::string norm = collapse_whitespace(stripped);
  if (norm.empty()) throw EmptyArtifact("source is empty after normalization");
  BpeaArtifact a;
  a.bytes.assign(norm.begin(), norm.end());
  a.origin = Origin::fallback;
  a.language = lang;
  a.toolchain_record = "fallback-normalize";
  return a;
}

RgbImage bytes_to_image(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw EmptyArtifact("cannot image an empty artifact");
  const std::size_t pixels = (bytes.size() + 2) / 3;
  RgbImage img;
  img.height = (pixels + kImageWidth - 1) / kImageWidth;
  img.pixels.assign(img.width * img.height * 3, 0);
  std::copy(bytes.begin(), bytes.end(), img.pixels.begin());
  return img;
}

std::vector<std::uint8_t> image_to_bytes(const RgbImage& img, std::size_t byte_len) {
  if (byte_len > img.pixels.size()) throw InvalidInput("byte_len exceeds image capacity");
  return {img.pixels.begin(), img.pixels.begin() + static_cast<std::ptrdiff_t>(byte_len)};
}

std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height * 3)
    throw InvalidInput("encode_png: inconsistent image");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_quiet_error, png_silent_warning);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 9);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

RgbImage decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw InvalidInput("not a PNG file");
  RgbImage img;
  ReadCursor cur{bytes, 0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_quiet_error, png_silent_warning);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InvalidInput("PNG decoding failed");
  }
  png_set_read_fn(png, &cur, png_read_from_span);
  png_read_info(png, info);
  const bool rgb8 = png_get_bit_depth(png, info) == 8 && png_get_color_type(png, info) == PNG_COLOR_TYPE_RGB &&
                    png_get_interlace_type(png, info) == PNG_INTERLACE_NONE;
  if (rgb8) {
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.pixels.resize(img.width * img.height * 3);
    for (std::size_t y = 0; y < img.height; ++y) png_read_row(png, img.pixels.data() + y * img.width * 3, nullptr);
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!rgb8) throw InvalidInput("PNG is not 8-bit non-interlaced RGB");
  return img;
}

void write_png(const RgbImage& img, const fs::path& path) { io::write_file_atomic(path, encode_png(img)); }

RgbImage read_png(const fs::path& path) { return decode_png(io::read_file(path)); }

std::vector<std::uint8_t> deterministic_zip(std::vector<std::pair<std::string, std::vector<std::uint8_t>>> entries) {
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < entries.size(); ++i)
    if (entries[i].first == entries[i - 1].first) throw InvalidInput("zip: duplicate entry '" + entries[i].first + "'");
  constexpr std::uint16_t kDosDate = 0x0021;  // 1980-01-01
  io::ByteWriter w;
  std::vector<std::uint32_t> offsets, crcs;
  for (const auto& [name, data] : entries) {
    const auto crc = static_cast<std::uint32_t>(::crc32(0L, data.data(), static_cast<uInt>(data.size())));
    offsets.push_back(static_cast<std::uint32_t>(w.bytes().size()));
    crcs.push_back(crc);
    w.put_u32(0x04034b50);
    w.put_u16(10);  // version needed
    w.put_u16(0);   // flags
    w.put_u16(0);   // stored
    w.put_u16(0);   // time
    w.put_u16(kDosDate);
    w.put_u32(crc);
    w.put_u32(static_cast<std::uint32_t>(data.size()));
    w.put_u32(static_cast<std::uint32_t>(data.size()));
    w.put_u16(static_cast<std::uint16_t>(name.size()));
    w.put_u16(0);
    w.put_string(name);
    w.put_bytes(data);
  }
  const auto cd_start = static_cast<std::uint32_t>(w.bytes().size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, data] = entries[i];
    w.put_u32(0x02014b50);
    w.put_u16(20);  // made by
    w.put_u16(10);
    w.put_u16(0);
    w.put_u16(0);
    w.put_u16(0);
    w.put_u16(kDosDate);
    w.put_u32(crcs[i]);
    w.put_u32(static_cast<std::uint32_t>(data.size()));
    w.put_u32(static_cast<std::uint32_t>(data.size()));
    w.put_u16(static_cast<std::uint16_t>(name.size()));
    w.put_u16(0);  // extra
    w.put_u16(0);  // comment
    w.put_u16(0);  // disk
    w.put_u16(0);  // internal attributes
    w.put_u32(0);  // external attributes
    w.put_u32(offsets[i]);
    w.put_string(name);
  }
  const auto cd_size = static_cast<std::uint32_t>(w.bytes().size()) - cd_start;
  w.put_u32(0x06054b50);
  w.put_u16(0);
  w.put_u16(0);
  w.put_u16(static_cast<std::uint16_t>(entries.size()));
  w.put_u16(static_cast<std::uint16_t>(entries.size()));
  w.put_u32(cd_size);
  w.put_u32(cd_start);
  w.put_u16(0);
  return w.bytes();
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string to_json_line(const ManifestEntry& e) {
  const nlohmann::json j{{"id", e.id},
                         {"source_path", e.source_path},
                         {"image_path", e.image_path},
                         {"origin", to_string(e.origin)},
                         {"byte_len", e.byte_len},
                         {"toolchain_record", e.toolchain_record},
                         {"sha256", e.sha256}};
  return j.dump();
}

ManifestEntry manifest_entry_from_json(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.source_path = j.at("source_path").get<std::string>();
    e.image_path = j.at("image_path").get<std::string>();
    const auto origin = j.at("origin").get<std::string>();
    if (origin == "compiled") e.origin = Origin::compiled;
    else if (origin == "fallback-normalized") e.origin = Origin::fallback;
    else throw InvalidInput("manifest: unknown origin '" + origin + "'");
    e.byte_len = j.at("byte_len").get<std::size_t>();
    e.toolchain_record = j.at("toolchain_record").get<std::string>();
    e.sha256 = j.at("sha256").get<std::string>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidInput(std::string("manifest line: ") + ex.what());
  }
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(manifest_entry_from_json(line));
  return out;
}

std::vector<ManifestEntry> convert(const ConvertOptions& opts) {
  std::vector<std::pair<fs::path, std::string>> jobs;  // source, id
  const auto id_of = [](const fs::path& rel) {
    std::string id = fs::path(rel).replace_extension().generic_string();
    for (std::size_t p; (p = id.find('/')) != std::string::npos;) id.replace(p, 1, "__");
    return id;
  };
  if (fs::is_regular_file(opts.input)) {
    jobs.emplace_back(opts.input, id_of(opts.input.filename()));
  } else if (fs::is_directory(opts.input)) {
    const auto& exts = extensions(opts.language);
    for (const auto& entry : fs::recursive_directory_iterator(opts.input)) {
      if (!entry.is_regular_file()) continue;
      if (std::find(exts.begin(), exts.end(), entry.path().extension().string()) == exts.end()) continue;
      jobs.emplace_back(entry.path(), id_of(fs::relative(entry.path(), opts.input)));
    }
  } else {
    throw IoError("input not found: " + opts.input.string());
  }
  std::sort(jobs.begin(), jobs.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
  for (std::size_t i = 1; i < jobs.size(); ++i)
    if (jobs[i].second == jobs[i - 1].second) throw InvalidInput("duplicate artifact id '" + jobs[i].second + "'");
  if (!opts.fallback_only) {
    // Fail fast, before any work, when the toolchain is missing.
    const auto& tc = opts.toolchain;
    switch (opts.language) {
      case Language::c: require_tool(tc.cc); break;
      case Language::cpp: require_tool(tc.cxx); break;
      case Language::java: require_tool(tc.javac); break;
      case Language::python: require_tool(tc.python); break;
    }
  }
  fs::create_directories(opts.output_dir);

  std::vector<ManifestEntry> entries(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      try {
        const auto& [source, id] = jobs[i];
        std::optional<BpeaArtifact> artifact;
        std::string note;
        if (!opts.fallback_only) {
          auto outcome = compile_source(source, opts.language, opts.toolchain);
          artifact = std::move(outcome.artifact);
          if (!artifact) note = " (compilation failed)";
        }
        if (!artifact) {
          const auto text = io::read_file(source);
          artifact = normalize_fallback(std::string_view(reinterpret_cast<const char*>(text.data()), text.size()),
                                        opts.language);
          artifact->toolchain_record += note;
        }
        const fs::path image_path = opts.output_dir / (id + ".png");
        write_png(bytes_to_image(artifact->bytes), image_path);
        entries[i] = {id,
                      source.string(),
                      image_path.string(),
                      artifact->origin,
                      artifact->bytes.size(),
                      artifact->toolchain_record,
                      sha256_hex(artifact->bytes)};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(opts.jobs, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw IoError(jobs[i].first.string() + ": " + e.what());
    }
  }

  std::string manifest;
  for (const auto& e : entries) manifest += to_json_line(e) + "\n";
  if (!opts.manifest.empty()) io::write_text_atomic(opts.manifest, manifest);
  return entries;
}

}  // namespace gocoma::bpea
