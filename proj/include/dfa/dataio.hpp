#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dfa/model.hpp"

namespace dfa {

// Paired image and label map. Images are (1,3,H,W) in [0,1]; labels are
// (1,H,W) with values in [0,K) or 255 (ignore).
struct SegSample {
    Tensor image;
    LabelMap labels;
};

// Binary P6 image, maxval 255, scaled to [0,1].
Tensor load_image_ppm(const std::string& path);
void save_image_ppm(const Tensor& image, const std::string& path);

// Binary P5 label plane, maxval 255.
LabelMap load_labels_pgm(const std::string& path);
void save_labels_pgm(const LabelMap& labels, const std::string& path);

// Deterministic class palette (bit-reversal construction, stable across runs).
std::array<uint8_t, 3> palette_color(int k);
void save_mask_ppm(const LabelMap& mask, const std::string& path);
LabelMap mask_from_palette_ppm(const std::string& path, int num_classes);

// Synthetic segmentation set: class-0 background plus K-1 rectangles/discs in
// disjoint grid cells with class-correlated colors and pixel noise sigma 0.05.
// Deterministic per (seed, index).
std::vector<SegSample> generate_toy_dataset(uint64_t seed, int count, int size, int num_classes);

// Dataset directory layout: images/NNNN.ppm + labels/NNNN.pgm.
void write_dataset(const std::string& dir, const std::vector<SegSample>& samples);
std::vector<SegSample> load_dataset(const std::string& dir);

struct AugmentConfig {
    double hflip_prob = 0.5;
    double scale_lo = 0.75, scale_hi = 1.75;
    int64_t crop_h = 0, crop_w = 0;  // 0 = full extent after scaling
    std::array<double, 3> mean = {0.485, 0.456, 0.406};

    void validate() const;
};

// Order: mean subtraction, horizontal flip, uniform scale (image bilinear,
// labels nearest-neighbor), random crop. Padding pixels are 0 (= mean) in the
// image and 255 in the labels.
SegSample augment(const SegSample& sample, const AugmentConfig& cfg, Rng& rng);

// Arbitrary-size half-pixel bilinear resize; data-side utility (no autograd).
Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w);
LabelMap resize_nearest(const LabelMap& labels, int64_t out_h, int64_t out_w);

// Checkpoint container: magic "DFAC", u32 version=1, u32-length-prefixed
// key=value config text, named tensor entries (u16 name length, name, u8
// dtype, u32 dims[4], payload), trailing CRC32 of all preceding bytes.
void save_checkpoint(const DfaNet& model, const std::string& path,
                     const std::map<std::string, std::string>& extra = {});

struct LoadedCheckpoint {
    std::unique_ptr<DfaNet> model;
    std::map<std::string, std::string> config;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Loads parameters into an existing model; throws ConfigError if the stored
// spec does not match.
std::map<std::string, std::string> load_checkpoint_into(DfaNet& model, const std::string& path);

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0);

}  // namespace dfa
