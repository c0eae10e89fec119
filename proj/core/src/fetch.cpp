#include "eqsep/fetch.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <thread>

#include <curl/curl.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <png.h>
#include <zlib.h>

#include "eqsep/dataset.hpp"
#include "eqsep/errors.hpp"

namespace eqsep {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest
//
// The archives are npm registry tarballs that redistribute the datasets: the
// original hosts are often unreachable from build machines while the registry
// is mirrored nearly everywhere. Archive digests pin the exact tarball; output
// digests pin the converted files that load_dataset() reads.

const std::vector<FetchManifestEntry>& builtin_manifest() {
  static const std::vector<FetchManifestEntry> manifest = {
      {
          "mnist",
          {"https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"},
          "mnist-data-1.2.6.tgz",
          "8f87f2d0d9133e6c9f7012d6d26bb05409e7e870a1de21d1a600b8d400cc07ed",
          ArchiveLayout::kIdxFiles,
          "package/data/",
          {
              {"train-images-idx3-ubyte",
               "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"},
              {"train-labels-idx1-ubyte",
               "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"},
              {"t10k-images-idx3-ubyte",
               "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"},
              {"t10k-labels-idx1-ubyte",
               "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"},
          },
      },
      {
          "fashion-mnist",
          {"https://registry.npmjs.org/fashion-mnist/-/fashion-mnist-1.1.0.tgz"},
          "fashion-mnist-1.1.0.tgz",
          "7fe48b6f9470efb6e15354b1b2005d60a544177bd24cf4b5da500e3e83d1f396",
          ArchiveLayout::kClassJson,
          "package/src/clothes/",
          {
              {"train-images-idx3-ubyte",
               "646b27d85ceafcb0a1efec88c397a5357446e24857f74351bc4818be57b71140"},
              {"train-labels-idx1-ubyte",
               "42d8a31792fb59dcec85b8e5b62bd03598c1a96f4edffe6f6a3e95daac9319ef"},
              {"t10k-images-idx3-ubyte",
               "31baa4e3c9916b5a569f4767c0d0dac570900261da8cfa364a784c38e58b68f7"},
              {"t10k-labels-idx1-ubyte",
               "2a4fb3eec0877aa3d4ab80d8f59374733af9b2b2966e8be0e50efe715f443a4d"},
          },
      },
      {
          "cifar10",
          {"https://registry.npmjs.org/tfjs-cifar10/-/tfjs-cifar10-1.1.1.tgz"},
          "tfjs-cifar10-1.1.1.tgz",
          "141f061ffa2f5e41adf9f7f13f2b40243340f4ea111205187afe18d0f3dbf9fb",
          ArchiveLayout::kPngRowsCifar10,
          "package/",
          {
              {"data_batch_1.bin", "cee916563c9f80d84e3cc88e17fdc0941787f1244f00a67874d45b261883ada5"},
              {"data_batch_2.bin", "a591ca11fa1708a91ee40f54b3da4784ccd871ecf2137de63f51ada8b3fa57ed"},
              {"data_batch_3.bin", "bbe8596564c0f86427f876058170b84dac6670ddf06d79402899d93ceea26f67"},
              {"data_batch_4.bin", "014e562d6e23c72197cc727519169a60359f5eccd8945ad5a09d710285ff4e48"},
              {"data_batch_5.bin", "755304fc0b379caeae8c14f0dac912fbc7d6cd469eb67a1029a08a39453a9add"},
              {"test_batch.bin", "8e2eb146ae340b09e24670f29cabc6326dba54da8789dab6768acf480273f65b"},
          },
      },
  };
  return manifest;
}

const FetchManifestEntry& manifest_entry(const std::string& dataset) {
  for (const auto& e : builtin_manifest()) {
    if (e.dataset == dataset) return e;
  }
  throw ConfigError("unknown dataset '" + dataset + "' (expected mnist, fashion-mnist or cifar10)");
}

// ---------------------------------------------------------------------------
// Primitives

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw IntegrityError("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

namespace {

std::size_t curl_sink(char* ptr, std::size_t size, std::size_t nmemb, void* user) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(user);
  out->insert(out->end(), ptr, ptr + size * nmemb);
  return size * nmemb;
}

struct CurlGlobal {
  CurlGlobal() { curl_global_init(CURL_GLOBAL_DEFAULT); }
  ~CurlGlobal() { curl_global_cleanup(); }
};

}  // namespace

std::vector<std::uint8_t> download(const std::string& url) {
  static CurlGlobal global;
  std::unique_ptr<CURL, decltype(&curl_easy_cleanup)> curl(curl_easy_init(), curl_easy_cleanup);
  if (!curl) throw TransportError("curl_easy_init failed");
  std::vector<std::uint8_t> body;
  char errbuf[CURL_ERROR_SIZE] = {0};
  curl_easy_setopt(curl.get(), CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl.get(), CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl.get(), CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl.get(), CURLOPT_CONNECTTIMEOUT, 30L);
  curl_easy_setopt(curl.get(), CURLOPT_LOW_SPEED_LIMIT, 1024L);
  curl_easy_setopt(curl.get(), CURLOPT_LOW_SPEED_TIME, 120L);
  curl_easy_setopt(curl.get(), CURLOPT_WRITEFUNCTION, curl_sink);
  curl_easy_setopt(curl.get(), CURLOPT_WRITEDATA, &body);
  curl_easy_setopt(curl.get(), CURLOPT_ERRORBUFFER, errbuf);
  const CURLcode rc = curl_easy_perform(curl.get());
  if (rc != CURLE_OK) {
    throw TransportError("download of " + url + " failed: " +
                         (errbuf[0] ? std::string(errbuf) : curl_easy_strerror(rc)));
  }
  return body;
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw FormatError("inflateInit2 failed");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> chunk{};
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  int rc = Z_OK;
  do {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError("gzip stream is corrupt");
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
  } while (rc != Z_STREAM_END && (zs.avail_in > 0 || zs.avail_out == 0));
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) throw LengthError("gzip stream is truncated");
  return out;
}

std::vector<std::uint8_t> gzip(std::span<const std::uint8_t> bytes) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_BEST_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw FormatError("deflateInit2 failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, uLong(bytes.size())));
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw FormatError("gzip compression failed");
  out.resize(zs.total_out);
  return out;
}

namespace {

std::size_t parse_octal(const std::uint8_t* field, std::size_t len) {
  std::size_t v = 0;
  for (std::size_t i = 0; i < len && field[i] != 0 && field[i] != ' '; ++i) {
    if (field[i] < '0' || field[i] > '7') throw FormatError("bad octal field in tar header");
    v = v * 8 + (field[i] - '0');
  }
  return v;
}

std::string c_field(const std::uint8_t* field, std::size_t len) {
  std::size_t n = 0;
  while (n < len && field[n] != 0) ++n;
  return std::string(reinterpret_cast<const char*>(field), n);
}

}  // namespace

std::vector<TarMember> read_tar(std::span<const std::uint8_t> bytes) {
  std::vector<TarMember> members;
  std::size_t pos = 0;
  while (pos + 512 <= bytes.size()) {
    const std::uint8_t* h = bytes.data() + pos;
    if (std::all_of(h, h + 512, [](std::uint8_t b) { return b == 0; })) break;
    const std::size_t size = parse_octal(h + 124, 12);
    const char type = static_cast<char>(h[156]);
    std::string name = c_field(h, 100);
    if (std::memcmp(h + 257, "ustar", 5) == 0) {
      const std::string prefix = c_field(h + 345, 155);
      if (!prefix.empty()) name = prefix + "/" + name;
    }
    pos += 512;
    if (pos + size > bytes.size()) throw LengthError("tar member '" + name + "' truncated");
    if (type == '0' || type == '\0') {
      members.push_back({name, std::vector<std::uint8_t>(bytes.begin() + std::ptrdiff_t(pos),
                                                         bytes.begin() + std::ptrdiff_t(pos + size))});
    }
    pos += (size + 511) / 512 * 512;
  }
  return members;
}

std::vector<std::uint8_t> write_tar(const std::vector<TarMember>& members) {
  std::vector<std::uint8_t> out;
  for (const auto& m : members) {
    if (m.name.size() >= 100) throw FormatError("tar member name too long: " + m.name);
    std::array<std::uint8_t, 512> h{};
    std::memcpy(h.data(), m.name.data(), m.name.size());
    std::snprintf(reinterpret_cast<char*>(h.data() + 100), 8, "%07o", 0644);
    std::snprintf(reinterpret_cast<char*>(h.data() + 108), 8, "%07o", 0);
    std::snprintf(reinterpret_cast<char*>(h.data() + 116), 8, "%07o", 0);
    std::snprintf(reinterpret_cast<char*>(h.data() + 124), 12, "%011zo", m.data.size());
    std::snprintf(reinterpret_cast<char*>(h.data() + 136), 12, "%011o", 0);
    h[156] = '0';
    std::memcpy(h.data() + 257, "ustar", 6);
    std::memcpy(h.data() + 263, "00", 2);
    std::memset(h.data() + 148, ' ', 8);
    unsigned sum = 0;
    for (auto b : h) sum += b;
    std::snprintf(reinterpret_cast<char*>(h.data() + 148), 8, "%06o", sum);
    out.insert(out.end(), h.begin(), h.end());
    out.insert(out.end(), m.data.begin(), m.data.end());
    out.resize((out.size() + 511) / 512 * 512, 0);
  }
  out.resize(out.size() + 1024, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Layout converters

namespace {

const TarMember& member(const std::vector<TarMember>& members, const std::string& name) {
  for (const auto& m : members) {
    if (m.name == name) return m;
  }
  throw FormatError("archive has no member '" + name + "'");
}

using Outputs = std::vector<std::pair<std::string, std::vector<std::uint8_t>>>;

Outputs convert_idx_files(const std::vector<TarMember>& members, const FetchManifestEntry& e) {
  Outputs out;
  for (const auto& o : e.outputs) out.emplace_back(o.name, member(members, e.member_prefix + o.name).data);
  return out;
}

// One JSON document per class, {"data": [[784 bytes], ...]}. Empty rows are
// separators; within each class the first 1000 images form the test split and
// the following 6000 the training split, matching the original 60k/10k
// partition sizes. Splits are emitted class-interleaved.
Outputs convert_class_json(const std::vector<TarMember>& members, const FetchManifestEntry& e) {
  constexpr std::size_t kTestPerClass = 1000;
  constexpr std::size_t kTrainPerClass = 6000;
  constexpr std::size_t kPixels = 28 * 28;
  std::vector<std::vector<std::vector<std::uint8_t>>> per_class(10);
  for (int k = 0; k < 10; ++k) {
    const auto& m = member(members, e.member_prefix + std::to_string(k) + ".json");
    const auto doc = nlohmann::json::parse(m.data.begin(), m.data.end());
    for (const auto& row : doc.at("data")) {
      if (row.empty()) continue;
      if (row.size() != kPixels) throw FormatError("class JSON row is not 28x28");
      std::vector<std::uint8_t> img(kPixels);
      for (std::size_t p = 0; p < kPixels; ++p) {
        const int v = row[p].get<int>();
        if (v < 0 || v > 255) throw FormatError("class JSON pixel out of byte range");
        img[p] = static_cast<std::uint8_t>(v);
      }
      per_class[std::size_t(k)].push_back(std::move(img));
    }
    if (per_class[std::size_t(k)].size() < kTestPerClass + kTrainPerClass) {
      throw FormatError("class " + std::to_string(k) + " has too few images");
    }
  }
  auto build = [&](std::size_t offset, std::size_t count) {
    IdxTensor images{{std::uint32_t(count * 10), 28, 28}, {}};
    IdxTensor labels{{std::uint32_t(count * 10)}, {}};
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t k = 0; k < 10; ++k) {
        const auto& img = per_class[k][offset + i];
        images.data.insert(images.data.end(), img.begin(), img.end());
        labels.data.push_back(std::uint8_t(k));
      }
    }
    return std::pair{serialize_idx(images), serialize_idx(labels)};
  };
  auto [train_x, train_y] = build(kTestPerClass, kTrainPerClass);
  auto [test_x, test_y] = build(0, kTestPerClass);
  return {{"train-images-idx3-ubyte", std::move(train_x)},
          {"train-labels-idx1-ubyte", std::move(train_y)},
          {"t10k-images-idx3-ubyte", std::move(test_x)},
          {"t10k-labels-idx1-ubyte", std::move(test_y)}};
}

std::vector<std::uint8_t> decode_png_rgb(const std::vector<std::uint8_t>& bytes,
                                         std::uint32_t& width, std::uint32_t& height) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError(std::string("PNG decode failed: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError(std::string("PNG decode failed: ") + image.message);
  }
  width = image.width;
  height = image.height;
  return pixels;
}

// Each PNG row holds one 32x32 image as 1024 interleaved RGB pixels; labels
// come from a JSON array. Rows are re-packed into the CIFAR-10 binary record
// (label, R plane, G plane, B plane).
Outputs convert_png_rows(const std::vector<TarMember>& members, const FetchManifestEntry& e) {
  constexpr std::size_t kPlane = kCifarSide * kCifarSide;
  const auto train_labels =
      nlohmann::json::parse(member(members, e.member_prefix + "train_lables.json").data);
  const auto test_labels =
      nlohmann::json::parse(member(members, e.member_prefix + "test_lables.json").data);

  auto convert = [&](const std::string& png_name, const nlohmann::json& labels, std::size_t offset) {
    std::uint32_t w = 0, h = 0;
    const auto rgb = decode_png_rgb(member(members, e.member_prefix + png_name).data, w, h);
    if (w != kPlane) throw FormatError(png_name + " rows are not 1024 pixels wide");
    std::vector<std::uint8_t> out;
    out.reserve(std::size_t(h) * kCifarRecordBytes);
    for (std::size_t r = 0; r < h; ++r) {
      const int label = labels.at(offset + r).get<int>();
      if (label < 0 || label >= 10) throw FormatError("CIFAR-10 label out of range");
      out.push_back(std::uint8_t(label));
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < kPlane; ++p) out.push_back(rgb[(r * kPlane + p) * 3 + c]);
      }
    }
    return out;
  };

  Outputs out;
  for (int b = 1; b <= 5; ++b) {
    out.emplace_back("data_batch_" + std::to_string(b) + ".bin",
                     convert("data_batch_" + std::to_string(b) + ".png", train_labels,
                             std::size_t(b - 1) * 10000));
  }
  out.emplace_back("test_batch.bin", convert("test_batch.png", test_labels, 0));
  return out;
}

// ---------------------------------------------------------------------------
// Locking and atomic writes

class DirectoryLock {
 public:
  explicit DirectoryLock(fs::path path) : path_(std::move(path)) {
    using namespace std::chrono;
    const auto deadline = steady_clock::now() + minutes(30);
    for (;;) {
      fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd_ >= 0) return;
      if (errno != EEXIST) throw IoError("cannot create lock file " + path_.string());
      if (steady_clock::now() > deadline) {
        throw IoError("timed out waiting for lock " + path_.string());
      }
      std::this_thread::sleep_for(milliseconds(500));
    }
  }
  ~DirectoryLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void write_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  fs::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write on " + tmp.string());
  }
  fs::rename(tmp, path);
}

bool file_verifies(const fs::path& path, const std::string& sha256) {
  if (!fs::exists(path)) return false;
  return sha256.empty() || sha256_hex(read_file(path)) == sha256;
}

}  // namespace

// ---------------------------------------------------------------------------
// fetch_dataset

FetchResult fetch_dataset(const std::string& dataset, const fs::path& dest) {
  return fetch_dataset(manifest_entry(dataset), dest);
}

FetchResult fetch_dataset(const FetchManifestEntry& entry, const fs::path& dest) {
  fs::create_directories(dest);
  DirectoryLock lock(dest / ("." + entry.dataset + ".lock"));

  FetchResult result;
  bool all_ok = true;
  for (const auto& o : entry.outputs) {
    const fs::path p = dest / o.name;
    result.files.push_back(p);
    if (!fs::exists(p)) {
      all_ok = false;
    } else if (!file_verifies(p, o.sha256)) {
      std::cerr << "eqsep fetch: integrity check failed for " << p.string() << ", rebuilding\n";
      result.repaired.push_back(o.name);
      all_ok = false;
    }
  }
  if (all_ok) return result;

  const fs::path archive_path = dest / entry.archive_name;
  std::vector<std::uint8_t> archive;
  if (fs::exists(archive_path)) {
    archive = read_file(archive_path);
    if (sha256_hex(archive) != entry.archive_sha256) {
      std::cerr << "eqsep fetch: cached archive " << archive_path.string()
                << " failed verification, downloading again\n";
      result.repaired.push_back(entry.archive_name);
      archive.clear();
    }
  }
  if (archive.empty()) {
    std::string last_error = "no URLs configured";
    // Registry CDNs occasionally stall before the first byte; retry a few times.
    for (int attempt = 0; attempt < 3 && archive.empty(); ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::seconds(2 * attempt));
      for (const auto& url : entry.urls) {
        try {
          archive = download(url);
          break;
        } catch (const TransportError& e) {
          last_error = e.what();
        }
      }
    }
    if (archive.empty()) throw TransportError("could not fetch " + entry.dataset + ": " + last_error);
    const std::string got = sha256_hex(archive);
    if (got != entry.archive_sha256) {
      throw IntegrityError("checksum mismatch for " + entry.archive_name + ": expected " +
                           entry.archive_sha256 + ", got " + got);
    }
    write_atomic(archive_path, archive);
    result.downloaded = true;
  }

  const auto members = read_tar(gunzip(archive));
  Outputs outputs;
  switch (entry.layout) {
    case ArchiveLayout::kIdxFiles: outputs = convert_idx_files(members, entry); break;
    case ArchiveLayout::kClassJson: outputs = convert_class_json(members, entry); break;
    case ArchiveLayout::kPngRowsCifar10: outputs = convert_png_rows(members, entry); break;
  }
  for (const auto& o : entry.outputs) {
    auto it = std::find_if(outputs.begin(), outputs.end(),
                           [&](const auto& kv) { return kv.first == o.name; });
    if (it == outputs.end()) throw FormatError("conversion did not produce " + o.name);
    if (!o.sha256.empty()) {
      const std::string got = sha256_hex(it->second);
      if (got != o.sha256) {
        throw IntegrityError("checksum mismatch for converted " + o.name + ": expected " +
                             o.sha256 + ", got " + got);
      }
    }
    write_atomic(dest / o.name, it->second);
  }
  return result;
}

}  // namespace eqsep
