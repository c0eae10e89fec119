#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "eqsep/dataset.hpp"
#include "eqsep/errors.hpp"
#include "eqsep/fetch.hpp"

using namespace eqsep;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

}  // namespace

TEST_CASE("sha256 known answers") {
  CHECK(sha256_hex({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex(bytes_of("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("gzip and tar round trips") {
  std::vector<std::uint8_t> payload;
  for (int i = 0; i < 5000; ++i) payload.push_back(std::uint8_t(i * 31 % 251));
  CHECK(gunzip(gzip(payload)) == payload);
  CHECK_THROWS_AS(gunzip(bytes_of("not gzip at all")), FormatError);

  const std::vector<TarMember> members = {{"pkg/a.bin", payload}, {"pkg/empty", {}}, {"b.txt", bytes_of("hi")}};
  const auto tar = write_tar(members);
  CHECK(tar.size() % 512 == 0);
  const auto back = read_tar(tar);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].name == members[i].name);
    CHECK(back[i].data == members[i].data);
  }
}

TEST_CASE("builtin manifest") {
  for (const char* name : {"mnist", "fashion-mnist", "cifar10"}) {
    const auto& e = manifest_entry(name);
    CHECK(e.dataset == name);
    CHECK_FALSE(e.urls.empty());
    CHECK(e.archive_sha256.size() == 64);
    for (const auto& o : e.outputs) CHECK(o.sha256.size() == 64);
  }
  CHECK(manifest_entry("cifar10").outputs.size() == 6);
  CHECK_THROWS_AS(manifest_entry("imagenet"), ConfigError);
}

TEST_CASE("fetch from a local archive, verify, and repair") {
  const fs::path root = fs::temp_directory_path() / "eqsep_test_fetch";
  fs::remove_all(root);
  fs::create_directories(root / "src");

  const std::vector<std::uint8_t> labels = {0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3};
  const std::vector<std::uint8_t> images = {0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 1, 9, 8, 7};
  const auto archive = gzip(write_tar({{"package/train-labels-idx1-ubyte", labels},
                                       {"package/train-images-idx3-ubyte", images}}));
  write_bytes(root / "src" / "toy.tgz", archive);

  FetchManifestEntry entry;
  entry.dataset = "toy";
  entry.urls = {"file://" + (root / "src" / "missing.tgz").string(), "file://" + (root / "src" / "toy.tgz").string()};
  entry.archive_name = "toy.tgz";
  entry.archive_sha256 = sha256_hex(archive);
  entry.layout = ArchiveLayout::kIdxFiles;
  entry.member_prefix = "package/";
  entry.outputs = {{"train-images-idx3-ubyte", sha256_hex(images)}, {"train-labels-idx1-ubyte", sha256_hex(labels)}};

  const fs::path dest = root / "toy";
  const FetchResult first = fetch_dataset(entry, dest);
  CHECK(first.downloaded);
  CHECK(first.repaired.empty());
  const auto ds = dataset_from_idx(parse_idx(read_file(dest / "train-images-idx3-ubyte")),
                                   parse_idx(read_file(dest / "train-labels-idx1-ubyte")));
  CHECK(ds.labels() == std::vector<int>{1, 2, 3});

  // second call is a no-op
  const FetchResult again = fetch_dataset(entry, dest);
  CHECK_FALSE(again.downloaded);
  CHECK(again.repaired.empty());

  // a corrupted output is rebuilt from the cached archive
  write_bytes(dest / "train-labels-idx1-ubyte", {0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 4});
  const FetchResult repaired = fetch_dataset(entry, dest);
  CHECK(repaired.repaired == std::vector<std::string>{"train-labels-idx1-ubyte"});
  CHECK_FALSE(repaired.downloaded);
  CHECK(read_file(dest / "train-labels-idx1-ubyte") == labels);

  // a corrupted archive is fetched again
  fs::remove(dest / "train-images-idx3-ubyte");
  write_bytes(dest / "toy.tgz", bytes_of("garbage"));
  const FetchResult refetched = fetch_dataset(entry, dest);
  CHECK(refetched.downloaded);
  CHECK(read_file(dest / "train-images-idx3-ubyte") == images);

  // a source whose digest does not match the manifest is refused
  FetchManifestEntry wrong = entry;
  wrong.archive_sha256 = std::string(64, '0');
  CHECK_THROWS_AS(fetch_dataset(wrong, root / "wrong"), IntegrityError);

  FetchManifestEntry nowhere = entry;
  nowhere.urls = {"file://" + (root / "src" / "missing.tgz").string()};
  CHECK_THROWS_AS(fetch_dataset(nowhere, root / "nowhere"), TransportError);
  fs::remove_all(root);
}
