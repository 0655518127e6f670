#pragma once

// Shared helpers for the fixture, CLI and acceptance suites.

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "legrad/fixtures.hpp"

namespace support {

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr);
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

/// Verifies every "<hash>  <name>" line of a SHA256SUMS file; returns the
/// names that fail or are missing.
inline std::vector<std::string> verify_checksums(const std::filesystem::path& dir) {
  std::ifstream in(dir / "SHA256SUMS");
  if (!in) return {"SHA256SUMS"};
  std::vector<std::string> bad;
  std::string hash, name;
  while (in >> hash >> name) {
    try {
      if (sha256_hex(legrad::read_binary_file(dir / name)) != hash) bad.push_back(name);
    } catch (const std::exception&) {
      bad.push_back(name);
    }
  }
  return bad;
}

struct ParityResult {
  double tokens = 0;  // max |Z^L - reference|
  double logits = 0;  // max |y - reference|
};

template <typename T>
ParityResult check_parity(const std::filesystem::path& path) {
  const auto file = legrad::load_container(path);
  const auto bundle = legrad::bundle_from_file<T>(file);
  const auto input = file.get<T>("parity.input");
  const auto trace = legrad::forward_trace(legrad::embed(input, bundle.weights, bundle.config), bundle.weights,
                                           bundle.config);
  const auto logits = legrad::classify(legrad::image_embedding(trace.tokens.back(), bundle), bundle.classifier());
  return {legrad::max_abs_diff(trace.tokens.back().template cast<double>(), file.get<double>("parity.tokens")),
          legrad::max_abs_diff(logits.template cast<double>(), file.get<double>("parity.logits"))};
}

struct Run {
  int status = -1;
  std::string output;
};

/// Runs a shell command, capturing stdout and stderr together.
inline Run run(const std::string& cmd) {
  Run r;
  FILE* p = ::popen((cmd + " 2>&1").c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.output.append(buf.data(), n);
  const int st = ::pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace support
