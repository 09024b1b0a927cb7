#pragma once

// Binary pre-executable artifacts: compile sources (or normalize them when
// compilation fails) and render the bytes as 256-pixel-wide RGB images.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gocoma::bpea {

enum class Language { c, cpp, java, python };
enum class Origin { compiled, fallback };

std::string_view to_string(Language lang);
std::string_view to_string(Origin origin);
Language parse_language(std::string_view name);
// Source extensions picked up from a directory walk.
const std::vector<std::string>& extensions(Language lang);

struct BpeaArtifact {
  std::vector<std::uint8_t> bytes;
  Origin origin = Origin::compiled;
  Language language = Language::c;
  std::string toolchain_record;
};

struct ToolchainConfig {
  std::string cc = "gcc", cxx = "g++", javac = "javac", python = "python3";
  // Extra flags; compile-only (-c) is always added for C/C++, and no
  // optimization level is forced.
  std::vector<std::string> c_flags, cxx_flags, java_flags;
};

struct CompileOutcome {
  std::optional<BpeaArtifact> artifact;  // empty: take the fallback path
  std::string diagnostics;
};

// Throws EnvironmentError when the compiler is not on PATH. A failed
// compilation is not an error: it returns an empty artifact.
CompileOutcome compile_source(const std::filesystem::path& source, Language lang, const ToolchainConfig& tc = {});

// Strips comments, replaces each string/char literal with one 'S' (0x53),
// collapses whitespace runs to one space and trims. Invalid UTF-8 is
// replaced with U+FFFD first. Throws EmptyArtifact if nothing is left.
BpeaArtifact normalize_fallback(std::string_view source, Language lang);
std::string lossy_utf8(std::string_view bytes);

inline constexpr std::size_t kImageWidth = 256;

struct RgbImage {
  std::size_t width = kImageWidth;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB
  bool operator==(const RgbImage&) const = default;
};

// Consecutive byte triplets become pixels, rows of 256, zero padded.
RgbImage bytes_to_image(std::span<const std::uint8_t> bytes);
// Inverse given the original length.
std::vector<std::uint8_t> image_to_bytes(const RgbImage& img, std::size_t byte_len);

// 8-bit RGB, fixed compression settings, no time chunk.
std::vector<std::uint8_t> encode_png(const RgbImage& img);
RgbImage decode_png(std::span<const std::uint8_t> png);
void write_png(const RgbImage& img, const std::filesystem::path& path);
RgbImage read_png(const std::filesystem::path& path);

// Stored (uncompressed) zip with entries sorted by name and a fixed
// 1980-01-01 00:00 timestamp.
std::vector<std::uint8_t> deterministic_zip(std::vector<std::pair<std::string, std::vector<std::uint8_t>>> entries);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

struct ManifestEntry {
  std::string id, source_path, image_path;
  Origin origin = Origin::compiled;
  std::size_t byte_len = 0;
  std::string toolchain_record;
  std::string sha256;  // of the artifact bytes
};

std::string to_json_line(const ManifestEntry& e);
ManifestEntry manifest_entry_from_json(std::string_view line);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

struct ConvertOptions {
  Language language = Language::c;
  std::filesystem::path input, output_dir, manifest;
  bool fallback_only = false;
  std::size_t jobs = 1;
  ToolchainConfig toolchain;
};

// Converts one file or every matching file under a directory. Entries come
// back sorted by id; the manifest is written as JSON lines.
std::vector<ManifestEntry> convert(const ConvertOptions& opts);

}  // namespace gocoma::bpea
