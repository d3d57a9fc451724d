#pragma once

#include <optional>
#include <string>

#include "onda/error.hpp"
#include "onda/proto_bank.hpp"
#include "onda/segnet.hpp"

namespace onda {

/// The file's architecture header differs from the one the caller expects.
class IncompatibleCheckpoint : public FormatError {
 public:
  IncompatibleCheckpoint(const ArchConfig& expected, const ArchConfig& found);
  const ArchConfig& expected() const { return expected_; }
  const ArchConfig& found() const { return found_; }

 private:
  ArchConfig expected_;
  ArchConfig found_;
};

struct CheckpointFile {
  ModelCheckpoint model;
  std::optional<PrototypeBank> bank;
};

// Layout ("ONDA1"): magic, u8 role, 7 x u32 arch, u32 tensor count, then per
// tensor u32 rank, u32 dims, f64 values; per block running mean, running var,
// momentum, eps; u8 bank flag and an optional "PBNK" bank section; trailing
// u64 FNV-1a of every preceding byte. All integers and floats little-endian.

std::string encode_checkpoint(const ModelCheckpoint& model, const PrototypeBank* bank = nullptr);
CheckpointFile decode_checkpoint(const std::string& bytes, const ArchConfig* expected = nullptr);

void save_checkpoint(const std::string& path, const ModelCheckpoint& model, const PrototypeBank* bank = nullptr);
CheckpointFile load_checkpoint(const std::string& path, const ArchConfig* expected = nullptr);

}  // namespace onda
