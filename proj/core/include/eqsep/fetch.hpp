#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace eqsep {

/// How the downloaded archive is turned into the on-disk dataset layout that
/// load_dataset() reads.
enum class ArchiveLayout {
  kIdxFiles,         // tarball carrying raw IDX files under `member_prefix`
  kClassJson,        // tarball with one JSON file of 28x28 byte rows per class
  kPngRowsCifar10,   // tarball with CIFAR-10 batches stored as 1024-px-wide PNG rows
};

struct FetchOutput {
  std::string name;    // file name inside the destination directory
  std::string sha256;  // lowercase hex; empty disables the check
};

struct FetchManifestEntry {
  std::string dataset;
  std::vector<std::string> urls;  // tried in order
  std::string archive_name;
  std::string archive_sha256;
  ArchiveLayout layout = ArchiveLayout::kIdxFiles;
  std::string member_prefix;  // path prefix of the payload inside the tarball
  std::vector<FetchOutput> outputs;
};

/// Pinned sources for mnist, fashion-mnist and cifar10.
const std::vector<FetchManifestEntry>& builtin_manifest();
const FetchManifestEntry& manifest_entry(const std::string& dataset);

struct FetchResult {
  std::vector<std::filesystem::path> files;
  bool downloaded = false;                  // the archive was fetched over the wire
  std::vector<std::string> repaired;        // cached outputs that failed verification
};

/// Makes `dest` hold verified output files. Idempotent: verified files are
/// left alone. A cached file whose digest does not match is reported in
/// `repaired` and rebuilt, re-downloading the archive if it is also bad.
/// IntegrityError if a fresh download or a rebuilt file still mismatches,
/// TransportError if no URL can be fetched, ConfigError for unknown names.
FetchResult fetch_dataset(const std::string& dataset, const std::filesystem::path& dest);
FetchResult fetch_dataset(const FetchManifestEntry& entry, const std::filesystem::path& dest);

// Building blocks, exposed for tests and tools.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> download(const std::string& url);  // http(s) and file://
std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> gzip(std::span<const std::uint8_t> bytes);

struct TarMember {
  std::string name;
  std::vector<std::uint8_t> data;
};
/// Regular-file members of a ustar archive.
std::vector<TarMember> read_tar(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_tar(const std::vector<TarMember>& members);

}  // namespace eqsep
