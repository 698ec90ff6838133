#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "panda/error.hpp"

namespace panda {

enum class LossMode { PWL, PLGeneral, PLProblemSpecific };
enum class SkipMode { Multiply, Concat };
enum class AdvMode { NonSaturating, Minimax };

const char* to_string(LossMode m);
const char* to_string(SkipMode m);
const char* to_string(AdvMode m);

// Single source of truth for a run. Immutable once validated.
struct RunConfig {
    // geometry
    int image_size = 64;       // square, power of two >= 16
    int channels = 3;          // 1 or 3
    int z_low_spatial = 0;     // 0 = image_size / 8
    int z_low_channels = 32;
    int z_high_channels = 64;
    int gen_base_channels = 16;

    // discriminator
    int attention_maps = 8;
    int disc_base_channels = 16;
    int disc_stages = 4;
    int disc_blocks_per_stage = 1;  // bump for a deeper backbone
    int filter_bank_size = 16;

    // objectives
    LossMode loss_mode = LossMode::PWL;
    SkipMode skip_mode = SkipMode::Multiply;
    AdvMode adv_mode = AdvMode::NonSaturating;

    // optimization
    double lr_generator = 7e-6;
    double lr_discriminator = 1e-5;
    double lr_perceptual = 1e-4;
    int batch_size = 15;
    int epochs = 1;
    int d_updates_per_step = 1;
    long seed = 0;

    // perceptual extractor
    int vgg_base_channels = 8;
    int tap_layer = 14;
    std::string extractor_path;

    // scoring
    std::array<double, 3> score_weights{1.0, 1.0, 1.0};
    double mask_sigma = 2.0;
    double mask_threshold = 0.5;

    // ablation switches
    bool enable_e1_high = true;
    bool enable_e1_low = true;
    bool enable_high_path = true;

    // bookkeeping
    int checkpoint_every = 0;  // steps; 0 = final checkpoint only
    int log_every = 1;

    int z_low_size() const { return z_low_spatial > 0 ? z_low_spatial : image_size / 8; }
    int z_high_size() const { return z_low_size() / 2; }
    int gen_stages() const;
    bool e1_high_active() const { return enable_e1_high && enable_high_path; }
};

// Flat key -> raw string value document, as parsed from a config file or
// assembled from CLI flags.
using ConfigDoc = std::map<std::string, std::string>;

// Parses the flat `key = value` text format. Lines starting with '#' and
// blank lines are ignored. Duplicate keys: last one wins.
ConfigDoc parse_config_text(const std::string& text);
ConfigDoc load_config_file(const std::string& path);

// Validates and fills defaults. Unknown keys are hard errors.
RunConfig make_run_config(const ConfigDoc& doc);

// Canonical serialization: every key in fixed order, exact round trip.
std::string config_to_text(const RunConfig& cfg);

// CRC32 of the canonical text, rendered as 8 hex digits.
std::string config_hash(const RunConfig& cfg);

// The documented key list (for --help and validation messages).
const std::vector<std::string>& config_keys();

}  // namespace panda
