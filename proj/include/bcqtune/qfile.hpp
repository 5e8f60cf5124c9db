#pragma once

#include <array>
#include <string>

#include "bcqtune/toymodel.hpp"

namespace bcqtune {

// ============================================================================
// File containers (all integers little-endian; see FORMATS.md)
//
//   BCQD  full-precision model (the pre-quantization stand-in network)
//   BCQ1  quantized base model: header, per-layer bit planes (64-bit words)
//         and scale arrays (f32), then the full-precision sections
//   BCQA  per-task checkpoint: base content hash + trained scale arrays only
//
// Every container ends with a CRC32 of all preceding bytes; loads verify it.
// ============================================================================

inline constexpr std::uint16_t kFormatVersion = 1;

void save_dense(const DenseTransformer& model, const std::string& path);
DenseTransformer load_dense(const std::string& path);

void save_model(const ToyTransformer& model, const std::string& path);
ToyTransformer load_model(const std::string& path);

// Content hash binding checkpoints to their base: SHA-256 over the model's
// canonical frozen content — header fields, bit planes, the scales of every
// plane NOT in `trained_planes`, biases, embeddings and norm parameters, all
// at their 32-bit file precision. Scales of trained planes are excluded, so
// the hash is invariant under scale-only training.
std::array<std::uint8_t, 32> content_hash(const ToyTransformer& model,
                                          const std::set<int>& trained_planes);

struct TaskCheckpoint {
  std::array<std::uint8_t, 32> base_hash{};
  std::set<int> planes;  // 0-based trained plane indices
  // Per quantized layer (canonical order), per trained plane (ascending):
  std::vector<std::vector<GroupedScales>> layer_scales;
};

TaskCheckpoint make_checkpoint(const ToyTransformer& model);
void save_checkpoint(const TaskCheckpoint& ckpt, const std::string& path);
void save_checkpoint(const ToyTransformer& model, const std::string& path);
TaskCheckpoint load_checkpoint(const std::string& path);

// Replaces the trained planes' scales; everything else untouched. Throws
// CompatibilityError when the checkpoint does not bind to this model.
void apply_checkpoint(ToyTransformer& model, const TaskCheckpoint& ckpt);

// ============================================================================
// Storage accounting
//
// MB means 10^6 bytes. Unpadded figures count exactly q*h_out*h_in bits of
// plane data plus 4 bytes per scale; padded figures count the 64-bit
// word-aligned rows actually written to disk. The two agree whenever h_in is
// a multiple of 64.
// ============================================================================

struct LayerSizeReport {
  std::string name;
  std::size_t h_out = 0, h_in = 0, g = 0;
  int q = 0;
  double plane_bytes_unpadded = 0.0;   // q*h_out*h_in/8
  std::size_t plane_bytes_padded = 0;  // q*h_out*ceil(h_in/64)*8
  std::size_t scale_bytes = 0;         // 4*q*h_out*(h_in/g)

  double bytes_unpadded() const { return plane_bytes_unpadded + scale_bytes; }
  std::size_t bytes_padded() const { return plane_bytes_padded + scale_bytes; }
  double mb() const { return bytes_unpadded() / 1e6; }
};

// g = kRowWise resolves to h_in; throws ConfigError when g does not divide h_in.
LayerSizeReport layer_size_report(const std::string& name, std::size_t h_out,
                                  std::size_t h_in, int q, std::size_t g);

struct ModelSizeReport {
  std::vector<LayerSizeReport> block_layers;  // the four shapes of one block
  std::size_t n_layers = 0;
  double quant_bytes_unpadded = 0.0;  // all blocks
  std::size_t quant_bytes_padded = 0;
  std::size_t fp32_bytes = 0;      // embeddings + biases + norms
  std::size_t framing_bytes = 0;   // header, per-layer dims, checksum
  std::size_t file_bytes = 0;      // exact size save_model will write

  double total_mb_unpadded() const {
    return (quant_bytes_unpadded + fp32_bytes + framing_bytes) / 1e6;
  }
};

// Size accounting for a model of this geometry; file_bytes matches the
// actual save_model output byte-for-byte.
ModelSizeReport model_size_report(const ModelConfig& geometry);

// Exact byte size of a checkpoint for this geometry and plane count.
std::size_t checkpoint_file_bytes(const ModelConfig& geometry,
                                  std::size_t n_planes);

// Dense fp32 container size (BCQD), for compression-ratio reporting.
std::size_t dense_file_bytes(const ModelConfig& geometry);

// ============================================================================
// Checksums (also used by the tests)
// ============================================================================

std::uint32_t crc32(const std::uint8_t* data, std::size_t len,
                    std::uint32_t seed = 0);
std::array<std::uint8_t, 32> sha256(const std::uint8_t* data, std::size_t len);

}  // namespace bcqtune
