#include "panda/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "panda/crc32.hpp"

namespace panda {

const char* to_string(LossMode m) {
    switch (m) {
        case LossMode::PWL: return "pwl";
        case LossMode::PLGeneral: return "pl_g";
        case LossMode::PLProblemSpecific: return "pl_ps";
    }
    return "?";
}

const char* to_string(SkipMode m) {
    return m == SkipMode::Multiply ? "multiply" : "concat";
}

const char* to_string(AdvMode m) {
    return m == AdvMode::NonSaturating ? "non_saturating" : "minimax";
}

int RunConfig::gen_stages() const {
    int s = 0;
    for (int d = image_size; d > z_low_size(); d /= 2) ++s;
    return s;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

struct Parser {
    const ConfigDoc& doc;
    std::vector<std::string> seen;

    bool has(const std::string& key) {
        seen.push_back(key);
        return doc.count(key) > 0;
    }

    std::string raw(const std::string& key) { return doc.at(key); }

    double number(const std::string& key, double fallback) {
        if (!has(key)) return fallback;
        const std::string v = raw(key);
        try {
            size_t pos = 0;
            double x = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            raise(ErrorCode::OutOfRange, key + ": not a number: '" + v + "'");
        }
    }

    long integer(const std::string& key, long fallback) {
        double x = number(key, static_cast<double>(fallback));
        if (x != std::floor(x))
            raise(ErrorCode::OutOfRange, key + ": expected an integer");
        return static_cast<long>(x);
    }

    bool boolean(const std::string& key, bool fallback) {
        if (!has(key)) return fallback;
        std::string v = raw(key);
        std::transform(v.begin(), v.end(), v.begin(), ::tolower);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        raise(ErrorCode::OutOfRange, key + ": expected a boolean, got '" + raw(key) + "'");
    }

    std::string text(const std::string& key, const std::string& fallback) {
        if (!has(key)) return fallback;
        return raw(key);
    }

    std::array<double, 3> vec3(const std::string& key, std::array<double, 3> fallback) {
        if (!has(key)) return fallback;
        std::string v = raw(key);
        std::replace(v.begin(), v.end(), '[', ' ');
        std::replace(v.begin(), v.end(), ']', ' ');
        std::replace(v.begin(), v.end(), ',', ' ');
        std::istringstream is(v);
        std::array<double, 3> out{};
        for (int i = 0; i < 3; ++i)
            if (!(is >> out[size_t(i)]))
                raise(ErrorCode::OutOfRange, key + ": expected 3 numbers");
        double extra;
        if (is >> extra) raise(ErrorCode::OutOfRange, key + ": expected exactly 3 numbers");
        return out;
    }
};

}  // namespace

ConfigDoc parse_config_text(const std::string& text) {
    ConfigDoc doc;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            raise(ErrorCode::MissingKey,
                  "line " + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty())
            raise(ErrorCode::MissingKey, "line " + std::to_string(lineno) + ": empty key");
        doc[key] = val;
    }
    return doc;
}

ConfigDoc load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) raise(ErrorCode::FileNotFound, "config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "image_size", "channels", "z_low_spatial", "z_low_channels", "z_high_channels",
        "gen_base_channels", "attention_maps", "disc_base_channels", "disc_stages",
        "disc_blocks_per_stage", "filter_bank_size", "loss_mode", "skip_mode", "adv_mode",
        "lr_generator", "lr_discriminator", "lr_perceptual", "batch_size", "epochs",
        "d_updates_per_step", "seed", "vgg_base_channels", "tap_layer", "extractor_path",
        "score_weights", "mask_sigma", "mask_threshold", "enable_e1_high", "enable_e1_low",
        "enable_high_path", "checkpoint_every", "log_every",
    };
    return keys;
}

RunConfig make_run_config(const ConfigDoc& doc) {
    RunConfig cfg;
    Parser p{doc, {}};

    cfg.image_size = static_cast<int>(p.integer("image_size", cfg.image_size));
    cfg.channels = static_cast<int>(p.integer("channels", cfg.channels));
    cfg.z_low_spatial = static_cast<int>(p.integer("z_low_spatial", cfg.z_low_spatial));
    cfg.z_low_channels = static_cast<int>(p.integer("z_low_channels", cfg.z_low_channels));
    cfg.z_high_channels = static_cast<int>(p.integer("z_high_channels", cfg.z_high_channels));
    cfg.gen_base_channels = static_cast<int>(p.integer("gen_base_channels", cfg.gen_base_channels));
    cfg.attention_maps = static_cast<int>(p.integer("attention_maps", cfg.attention_maps));
    cfg.disc_base_channels =
        static_cast<int>(p.integer("disc_base_channels", cfg.disc_base_channels));
    cfg.disc_stages = static_cast<int>(p.integer("disc_stages", cfg.disc_stages));
    cfg.disc_blocks_per_stage =
        static_cast<int>(p.integer("disc_blocks_per_stage", cfg.disc_blocks_per_stage));
    cfg.filter_bank_size = static_cast<int>(p.integer("filter_bank_size", cfg.filter_bank_size));

    std::string lm = p.text("loss_mode", to_string(cfg.loss_mode));
    if (lm == "pwl") cfg.loss_mode = LossMode::PWL;
    else if (lm == "pl_g") cfg.loss_mode = LossMode::PLGeneral;
    else if (lm == "pl_ps") cfg.loss_mode = LossMode::PLProblemSpecific;
    else raise(ErrorCode::OutOfRange, "loss_mode: '" + lm + "' (expected pwl|pl_g|pl_ps)");

    std::string sm = p.text("skip_mode", to_string(cfg.skip_mode));
    if (sm == "multiply") cfg.skip_mode = SkipMode::Multiply;
    else if (sm == "concat") cfg.skip_mode = SkipMode::Concat;
    else raise(ErrorCode::OutOfRange, "skip_mode: '" + sm + "' (expected multiply|concat)");

    std::string am = p.text("adv_mode", to_string(cfg.adv_mode));
    if (am == "non_saturating") cfg.adv_mode = AdvMode::NonSaturating;
    else if (am == "minimax") cfg.adv_mode = AdvMode::Minimax;
    else raise(ErrorCode::OutOfRange, "adv_mode: '" + am + "' (expected non_saturating|minimax)");

    cfg.lr_generator = p.number("lr_generator", cfg.lr_generator);
    cfg.lr_discriminator = p.number("lr_discriminator", cfg.lr_discriminator);
    cfg.lr_perceptual = p.number("lr_perceptual", cfg.lr_perceptual);
    cfg.batch_size = static_cast<int>(p.integer("batch_size", cfg.batch_size));
    cfg.epochs = static_cast<int>(p.integer("epochs", cfg.epochs));
    cfg.d_updates_per_step = static_cast<int>(p.integer("d_updates_per_step", cfg.d_updates_per_step));
    cfg.seed = p.integer("seed", cfg.seed);
    cfg.vgg_base_channels = static_cast<int>(p.integer("vgg_base_channels", cfg.vgg_base_channels));
    cfg.tap_layer = static_cast<int>(p.integer("tap_layer", cfg.tap_layer));
    cfg.extractor_path = p.text("extractor_path", cfg.extractor_path);
    cfg.score_weights = p.vec3("score_weights", cfg.score_weights);
    cfg.mask_sigma = p.number("mask_sigma", cfg.mask_sigma);
    cfg.mask_threshold = p.number("mask_threshold", cfg.mask_threshold);
    cfg.enable_e1_high = p.boolean("enable_e1_high", cfg.enable_e1_high);
    cfg.enable_e1_low = p.boolean("enable_e1_low", cfg.enable_e1_low);
    cfg.enable_high_path = p.boolean("enable_high_path", cfg.enable_high_path);
    cfg.checkpoint_every = static_cast<int>(p.integer("checkpoint_every", cfg.checkpoint_every));
    cfg.log_every = static_cast<int>(p.integer("log_every", cfg.log_every));

    // unknown keys are hard errors: silent hyperparameter typos are worse
    for (const auto& [key, _] : doc) {
        if (std::find(p.seen.begin(), p.seen.end(), key) == p.seen.end())
            raise(ErrorCode::UnknownKey, key);
    }

    // range validation
    if (!is_power_of_two(cfg.image_size) || cfg.image_size < 16)
        raise(ErrorCode::OutOfRange,
              "image_size: " + std::to_string(cfg.image_size) + " (power of two >= 16 required)");
    if (cfg.channels != 1 && cfg.channels != 3)
        raise(ErrorCode::OutOfRange, "channels: " + std::to_string(cfg.channels) + " (1 or 3)");
    if (cfg.lr_generator <= 0) raise(ErrorCode::OutOfRange, "lr_generator: must be > 0");
    if (cfg.lr_discriminator <= 0) raise(ErrorCode::OutOfRange, "lr_discriminator: must be > 0");
    if (cfg.lr_perceptual <= 0) raise(ErrorCode::OutOfRange, "lr_perceptual: must be > 0");
    if (cfg.batch_size < 1) raise(ErrorCode::OutOfRange, "batch_size: must be >= 1");
    if (cfg.epochs < 1) raise(ErrorCode::OutOfRange, "epochs: must be >= 1");
    if (cfg.d_updates_per_step < 1) raise(ErrorCode::OutOfRange, "d_updates_per_step: must be >= 1");
    if (cfg.attention_maps < 1) raise(ErrorCode::OutOfRange, "attention_maps: must be >= 1");
    if (cfg.z_low_channels < 1) raise(ErrorCode::OutOfRange, "z_low_channels: must be >= 1");
    if (cfg.z_high_channels < 1) raise(ErrorCode::OutOfRange, "z_high_channels: must be >= 1");
    if (cfg.gen_base_channels < 1) raise(ErrorCode::OutOfRange, "gen_base_channels: must be >= 1");
    if (cfg.disc_base_channels < 1) raise(ErrorCode::OutOfRange, "disc_base_channels: must be >= 1");
    if (cfg.disc_stages < 1) raise(ErrorCode::OutOfRange, "disc_stages: must be >= 1");
    if (cfg.disc_blocks_per_stage < 1)
        raise(ErrorCode::OutOfRange, "disc_blocks_per_stage: must be >= 1");
    if (cfg.filter_bank_size < 1) raise(ErrorCode::OutOfRange, "filter_bank_size: must be >= 1");
    if (cfg.tap_layer < 1) raise(ErrorCode::OutOfRange, "tap_layer: must be >= 1");
    if (cfg.vgg_base_channels < 1) raise(ErrorCode::OutOfRange, "vgg_base_channels: must be >= 1");
    if (cfg.mask_sigma < 0) raise(ErrorCode::OutOfRange, "mask_sigma: must be >= 0");
    if (cfg.mask_threshold < 0 || cfg.mask_threshold > 1)
        raise(ErrorCode::OutOfRange, "mask_threshold: must be in [0,1]");
    if (cfg.checkpoint_every < 0) raise(ErrorCode::OutOfRange, "checkpoint_every: must be >= 0");
    if (cfg.log_every < 1) raise(ErrorCode::OutOfRange, "log_every: must be >= 1");

    double wsum = 0;
    for (double w : cfg.score_weights) {
        if (w < 0) raise(ErrorCode::OutOfRange, "score_weights: entries must be >= 0");
        wsum += w;
    }
    if (wsum == 0) raise(ErrorCode::OutOfRange, "score_weights: must not be all zero");

    if (cfg.z_low_spatial != 0) {
        if (!is_power_of_two(cfg.z_low_spatial) || cfg.z_low_spatial >= cfg.image_size)
            raise(ErrorCode::OutOfRange,
                  "z_low_spatial: power of two < image_size required");
    }
    int zl = cfg.z_low_size();
    if (zl < 2 && cfg.enable_high_path)
        raise(ErrorCode::OutOfRange, "z_low_spatial: must be >= 2 when the high path is enabled");
    if (zl < 1) raise(ErrorCode::OutOfRange, "z_low_spatial: derived size < 1");

    int disc_out = cfg.image_size >> cfg.disc_stages;
    if (disc_out < 1)
        raise(ErrorCode::OutOfRange, "disc_stages: backbone output would vanish");

    if (cfg.loss_mode == LossMode::PLProblemSpecific && cfg.extractor_path.empty())
        raise(ErrorCode::MissingKey,
              "extractor_path (required when loss_mode = pl_ps)");

    return cfg;
}

std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream os;
    auto num = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    os << "image_size = " << cfg.image_size << "\n";
    os << "channels = " << cfg.channels << "\n";
    os << "z_low_spatial = " << cfg.z_low_spatial << "\n";
    os << "z_low_channels = " << cfg.z_low_channels << "\n";
    os << "z_high_channels = " << cfg.z_high_channels << "\n";
    os << "gen_base_channels = " << cfg.gen_base_channels << "\n";
    os << "attention_maps = " << cfg.attention_maps << "\n";
    os << "disc_base_channels = " << cfg.disc_base_channels << "\n";
    os << "disc_stages = " << cfg.disc_stages << "\n";
    os << "disc_blocks_per_stage = " << cfg.disc_blocks_per_stage << "\n";
    os << "filter_bank_size = " << cfg.filter_bank_size << "\n";
    os << "loss_mode = " << to_string(cfg.loss_mode) << "\n";
    os << "skip_mode = " << to_string(cfg.skip_mode) << "\n";
    os << "adv_mode = " << to_string(cfg.adv_mode) << "\n";
    os << "lr_generator = " << num(cfg.lr_generator) << "\n";
    os << "lr_discriminator = " << num(cfg.lr_discriminator) << "\n";
    os << "lr_perceptual = " << num(cfg.lr_perceptual) << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "epochs = " << cfg.epochs << "\n";
    os << "d_updates_per_step = " << cfg.d_updates_per_step << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "vgg_base_channels = " << cfg.vgg_base_channels << "\n";
    os << "tap_layer = " << cfg.tap_layer << "\n";
    os << "extractor_path = " << cfg.extractor_path << "\n";
    os << "score_weights = [" << num(cfg.score_weights[0]) << ", " << num(cfg.score_weights[1])
       << ", " << num(cfg.score_weights[2]) << "]\n";
    os << "mask_sigma = " << num(cfg.mask_sigma) << "\n";
    os << "mask_threshold = " << num(cfg.mask_threshold) << "\n";
    os << "enable_e1_high = " << (cfg.enable_e1_high ? "true" : "false") << "\n";
    os << "enable_e1_low = " << (cfg.enable_e1_low ? "true" : "false") << "\n";
    os << "enable_high_path = " << (cfg.enable_high_path ? "true" : "false") << "\n";
    os << "checkpoint_every = " << cfg.checkpoint_every << "\n";
    os << "log_every = " << cfg.log_every << "\n";
    return os.str();
}

std::string config_hash(const RunConfig& cfg) {
    std::string text = config_to_text(cfg);
    uint32_t h = crc32(text.data(), text.size());
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", h);
    return buf;
}

}  // namespace panda
