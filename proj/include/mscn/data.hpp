#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mscn/model.hpp"
#include "mscn/png_io.hpp"
#include "mscn/rng.hpp"
#include "mscn/tensor.hpp"

namespace mscn {

/// One training instance: RGB image in [0,1], auxiliary rasters or scalars
/// keyed by canonical name, class label.
struct Sample {
    std::string id;
    Tensor image;                                       // [3 x H x W]
    std::vector<std::pair<std::string, Tensor>> aux;    // canonical order; rank-2 raster or rank-0 scalar
    int label = 0;

    const Tensor* find_aux(const std::string& name) const {
        for (const auto& [n, t] : aux)
            if (n == name) return &t;
        return nullptr;
    }
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

struct ManifestRow {
    std::string sample_id;
    std::string image;
    int label = 0;
    std::array<std::string, 4> aux_cells;  // empty string = absent
};

struct DatasetManifest {
    std::filesystem::path root;
    std::filesystem::path csv_path;
    Split split = Split::train;
    std::vector<ManifestRow> rows;
};

/// Synthetic dataset knobs. Class 0 plays the majority ("plantation analog")
/// role under the default proportions. aux_informativeness mixes each
/// auxiliary's class signal with pure noise: lambda*signal + (1-lambda)*noise.
struct SyntheticSpec {
    std::size_t num_train = 800;
    std::size_t num_val = 200;
    std::size_t num_test = 200;
    std::vector<double> class_proportions{0.50, 0.20, 0.20, 0.10};
    std::size_t image_size = 64;
    std::size_t aux_raster_size = 16;  // 0 emits scalar auxiliaries
    double class_separation = 1.0;
    std::array<double, 4> aux_informativeness{0.8, 0.8, 0.8, 0.8};
    double noise_level = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (class_proportions.empty()) throw ConfigError("synthetic spec: class_proportions is empty");
        double sum = 0.0;
        for (double p : class_proportions) {
            if (!(p >= 0.0)) throw ConfigError("synthetic spec: class_proportions entries must be non-negative");
            sum += p;
        }
        if (std::fabs(sum - 1.0) > 1e-9) {
            throw ConfigError("synthetic spec: class_proportions sum to " + std::to_string(sum) + ", expected 1");
        }
        if (image_size == 0) throw ConfigError("synthetic spec: image_size must be positive");
        if (!(class_separation > 0.0)) throw ConfigError("synthetic spec: class_separation must be positive");
        for (double l : aux_informativeness) {
            if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("synthetic spec: aux_informativeness must lie in [0,1]");
        }
        if (!(noise_level >= 0.0)) throw ConfigError("synthetic spec: noise_level must be non-negative");
        if (num_train == 0) throw ConfigError("synthetic spec: num_train must be positive");
    }
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Class counts by largest-remainder rounding; ties go to the lower class.
inline std::vector<std::size_t> class_counts(std::size_t n, const std::vector<double>& proportions) {
    std::vector<std::size_t> counts(proportions.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < proportions.size(); ++c) {
        const double exact = proportions[c] * static_cast<double>(n);
        counts[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[c];
        remainders.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) counts[remainders[i % remainders.size()].second]++;
    return counts;
}

namespace detail {

/// Smooth random field in [0,1]: a coarse grid of uniforms, bilinearly
/// upsampled.
inline std::vector<double> smooth_field(Rng& rng, std::size_t size, std::size_t grid) {
    grid = std::max<std::size_t>(grid, 2);
    std::vector<double> coarse(grid * grid);
    for (double& v : coarse) v = rng.uniform();
    std::vector<double> out(size * size);
    const double scale = size > 1 ? static_cast<double>(grid - 1) / static_cast<double>(size - 1) : 0.0;
    for (std::size_t y = 0; y < size; ++y) {
        const double fy = y * scale;
        const std::size_t y0 = std::min(static_cast<std::size_t>(fy), grid - 2);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = x * scale;
            const std::size_t x0 = std::min(static_cast<std::size_t>(fx), grid - 2);
            const double tx = fx - static_cast<double>(x0);
            const double v00 = coarse[y0 * grid + x0], v01 = coarse[y0 * grid + x0 + 1];
            const double v10 = coarse[(y0 + 1) * grid + x0], v11 = coarse[(y0 + 1) * grid + x0 + 1];
            out[y * size + x] = (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
        }
    }
    return out;
}

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

inline std::vector<std::uint8_t> image_to_rgb8(const Tensor& image) {
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::vector<std::uint8_t> rgb(h * w * 3);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double v = clamp01(image[(c * h + y) * w + x]);
                rgb[(y * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    return rgb;
}

inline Tensor rgb8_to_image(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& rgb) {
    Tensor t({3, h, w});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) t[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] / 255.0;
    return t;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

inline constexpr const char* kManifestHeader = "sample_id,image,label,slope,altitude,aspect,gain";

/// Deterministically generates the synthetic imbalanced multimodal dataset:
/// per class one smooth image prototype and four auxiliary prototype scalars;
/// each sample is its class prototype plus seeded noise. Writes PNGs, one
/// manifest CSV per split and the aux_ranges.csv sidecar. Identical specs
/// produce byte-identical trees.
inline std::map<Split, DatasetManifest> generate_synthetic(const SyntheticSpec& spec,
                                                           const std::filesystem::path& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    fs::create_directories(out_dir / "aux", ec);
    if (ec || !fs::exists(out_dir / "images") || !fs::exists(out_dir / "aux")) {
        throw IoError("cannot create dataset directory: " + out_dir.string());
    }

    const std::size_t num_classes = spec.class_proportions.size();
    const std::size_t s = spec.image_size;

    // Class prototypes: three-channel smooth fields pulled toward/away from
    // mid-gray by the separation knob, plus one scalar per auxiliary.
    std::vector<Tensor> image_protos;
    std::vector<std::array<double, 4>> aux_protos;
    for (std::size_t c = 0; c < num_classes; ++c) {
        Tensor proto({3, s, s});
        for (std::size_t ch = 0; ch < 3; ++ch) {
            Rng rng(mix_seed(spec.seed, {0xC7A5, c, ch}));
            std::vector<double> field = detail::smooth_field(rng, s, 8);
            for (std::size_t i = 0; i < field.size(); ++i) {
                proto[ch * s * s + i] = detail::clamp01(0.5 + spec.class_separation * (field[i] - 0.5));
            }
        }
        image_protos.push_back(std::move(proto));
        Rng arng(mix_seed(spec.seed, {0xA07, c}));
        aux_protos.push_back({arng.uniform(), arng.uniform(), arng.uniform(), arng.uniform()});
    }

    std::ostringstream ranges;
    ranges << "file,min,max\n";

    std::map<Split, DatasetManifest> result;
    const std::array<std::pair<Split, std::size_t>, 3> splits{
        std::make_pair(Split::train, spec.num_train),
        std::make_pair(Split::val, spec.num_val),
        std::make_pair(Split::test, spec.num_test)};

    for (const auto& [split, n] : splits) {
        DatasetManifest manifest;
        manifest.root = out_dir;
        manifest.split = split;
        manifest.csv_path = out_dir / ("manifest_" + std::string(split_name(split)) + ".csv");
        if (n == 0) {
            if (split != Split::train) continue;
        }

        const std::vector<std::size_t> counts = class_counts(n, spec.class_proportions);
        std::vector<int> labels;
        labels.reserve(n);
        for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], static_cast<int>(c));
        Rng lrng(mix_seed(spec.seed, {0xBEEF, static_cast<std::uint64_t>(split)}));
        lrng.shuffle(labels);

        std::ostringstream csv;
        csv << kManifestHeader << "\n";

        for (std::size_t i = 0; i < n; ++i) {
            const int label = labels[i];
            char idbuf[32];
            std::snprintf(idbuf, sizeof(idbuf), "%s_%05zu", split_name(split), i);
            const std::string id = idbuf;

            Rng rng(mix_seed(spec.seed, {0x5A3D, static_cast<std::uint64_t>(split), i}));

            Tensor image = image_protos[static_cast<std::size_t>(label)];
            for (double& v : image.values()) v = detail::clamp01(v + spec.noise_level * rng.normal());
            const std::string image_rel = "images/" + id + ".png";
            write_png_rgb8(out_dir / image_rel, s, s, detail::image_to_rgb8(image));

            ManifestRow row;
            row.sample_id = id;
            row.image = image_rel;
            row.label = label;

            for (std::size_t a = 0; a < 4; ++a) {
                const double lambda = spec.aux_informativeness[a];
                const double noise_value = rng.uniform();
                const double v = lambda * aux_protos[static_cast<std::size_t>(label)][a] + (1.0 - lambda) * noise_value;
                if (spec.aux_raster_size == 0) {
                    row.aux_cells[a] = format_double(v);
                    continue;
                }
                const std::size_t rs = spec.aux_raster_size;
                std::vector<double> texture = detail::smooth_field(rng, rs, 4);
                std::vector<double> raster(rs * rs);
                double mn = 1e300, mx = -1e300;
                for (std::size_t p = 0; p < raster.size(); ++p) {
                    raster[p] = v + spec.noise_level * (texture[p] - 0.5);
                    mn = std::min(mn, raster[p]);
                    mx = std::max(mx, raster[p]);
                }
                const std::string aux_rel = "aux/" + id + "_" + kAuxNames[a] + ".png";
                std::vector<std::uint16_t> quantized(raster.size(), 0);
                if (mx > mn) {
                    for (std::size_t p = 0; p < raster.size(); ++p) {
                        quantized[p] = static_cast<std::uint16_t>(
                            std::lround((raster[p] - mn) / (mx - mn) * 65535.0));
                    }
                }
                write_png_gray16(out_dir / aux_rel, rs, rs, quantized);
                ranges << aux_rel << "," << format_double(mn) << "," << format_double(mx) << "\n";
                row.aux_cells[a] = aux_rel;
            }

            csv << row.sample_id << "," << row.image << "," << row.label;
            for (const std::string& cell : row.aux_cells) csv << "," << cell;
            csv << "\n";
            manifest.rows.push_back(std::move(row));
        }

        std::ofstream f(manifest.csv_path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write manifest: " + manifest.csv_path.string());
        f << csv.str();
        result.emplace(split, std::move(manifest));
    }

    std::ofstream rf(out_dir / "aux_ranges.csv", std::ios::binary | std::ios::trunc);
    if (!rf) throw IoError("cannot write aux_ranges.csv under " + out_dir.string());
    rf << ranges.str();
    return result;
}

/// A loaded, fully validated dataset. Images are decoded to [0,1]; raster
/// auxiliaries are mapped through their (min,max) range entries.
class Dataset {
public:
    /// Loads and validates a manifest. When num_classes is given, labels must
    /// lie in [0, num_classes). Every failure names the offending row or file.
    static Dataset load(const std::filesystem::path& manifest_csv, std::optional<int> num_classes = std::nullopt) {
        namespace fs = std::filesystem;
        std::ifstream f(manifest_csv);
        if (!f) throw ValidationError("manifest not found: " + manifest_csv.string());
        const fs::path root = manifest_csv.parent_path();

        std::map<std::string, std::pair<double, double>> ranges;
        bool ranges_loaded = false;

        Dataset ds;
        ds.manifest_path_ = manifest_csv;
        std::string line;
        if (!std::getline(f, line)) throw ValidationError("empty manifest: " + manifest_csv.string());
        {
            auto fields = detail::split_csv_line(line);
            auto expect = detail::split_csv_line(kManifestHeader);
            if (fields != expect) {
                throw ValidationError("manifest header mismatch in " + manifest_csv.string());
            }
        }

        std::map<std::string, bool> seen_ids;
        std::array<int, 4> aux_presence{-1, -1, -1, -1};  // -1 unknown, else 0/1
        std::size_t row_no = 1;
        while (std::getline(f, line)) {
            ++row_no;
            if (line.empty()) continue;
            auto fields = detail::split_csv_line(line);
            const std::string where = "row " + std::to_string(row_no) + " of " + manifest_csv.string();
            if (fields.size() != 7) throw ValidationError("expected 7 columns at " + where);

            Sample sample;
            sample.id = fields[0];
            if (sample.id.empty()) throw ValidationError("empty sample_id at " + where);
            if (seen_ids.count(sample.id)) throw ValidationError("duplicate sample_id '" + sample.id + "' at " + where);
            seen_ids[sample.id] = true;

            {
                char* end = nullptr;
                const long parsed = std::strtol(fields[2].c_str(), &end, 10);
                if (fields[2].empty() || end != fields[2].c_str() + fields[2].size()) {
                    throw ValidationError("unparseable label '" + fields[2] + "' at " + where);
                }
                sample.label = static_cast<int>(parsed);
            }
            if (sample.label < 0 || (num_classes && sample.label >= *num_classes)) {
                throw ValidationError("label " + std::to_string(sample.label) + " out of range at " + where);
            }

            const fs::path image_path = root / fields[1];
            if (!fs::exists(image_path)) {
                throw ValidationError("missing image file " + image_path.string() + " at " + where);
            }
            std::size_t h = 0, w = 0;
            std::vector<std::uint8_t> rgb;
            read_png_rgb8(image_path, h, w, rgb);
            sample.image = detail::rgb8_to_image(h, w, rgb);

            for (std::size_t a = 0; a < 4; ++a) {
                const std::string& cell = fields[3 + a];
                const bool present = !cell.empty();
                if (aux_presence[a] == -1) aux_presence[a] = present ? 1 : 0;
                else if (aux_presence[a] != (present ? 1 : 0)) {
                    throw ValidationError(std::string("inconsistent '") + kAuxNames[a] + "' column at " + where);
                }
                if (!present) continue;
                if (cell.size() > 4 && cell.compare(cell.size() - 4, 4, ".png") == 0) {
                    if (!ranges_loaded) {
                        load_ranges(root / "aux_ranges.csv", ranges);
                        ranges_loaded = true;
                    }
                    const fs::path aux_path = root / cell;
                    if (!fs::exists(aux_path)) {
                        throw ValidationError("missing aux file " + aux_path.string() + " at " + where);
                    }
                    auto rit = ranges.find(cell);
                    if (rit == ranges.end()) {
                        throw ValidationError("no aux_ranges entry for " + cell + " at " + where);
                    }
                    std::size_t ah = 0, aw = 0;
                    std::vector<std::uint16_t> gray;
                    read_png_gray16(aux_path, ah, aw, gray);
                    Tensor raster({ah, aw});
                    const auto [mn, mx] = rit->second;
                    for (std::size_t p = 0; p < gray.size(); ++p) {
                        raster[p] = mx > mn ? mn + (gray[p] / 65535.0) * (mx - mn) : mn;
                    }
                    sample.aux.emplace_back(kAuxNames[a], std::move(raster));
                } else {
                    char* end = nullptr;
                    const double v = std::strtod(cell.c_str(), &end);
                    if (end == cell.c_str() || *end != '\0') {
                        throw ValidationError("unparseable aux value '" + cell + "' at " + where);
                    }
                    sample.aux.emplace_back(kAuxNames[a], Tensor::scalar(v));
                }
            }

            if (!ds.samples_.empty() && !sample.image.same_shape(ds.samples_.front().image)) {
                throw ValidationError("image shape " + sample.image.shape_str() + " differs from first row at " + where);
            }
            ds.max_label_ = std::max(ds.max_label_, sample.label);
            ds.samples_.push_back(std::move(sample));
        }
        if (ds.samples_.empty()) throw ValidationError("manifest has no rows: " + manifest_csv.string());
        for (std::size_t a = 0; a < 4; ++a)
            if (aux_presence[a] == 1) ds.aux_names_.emplace_back(kAuxNames[a]);
        return ds;
    }

    std::size_t size() const { return samples_.size(); }
    const Sample& sample(std::size_t i) const { return samples_[i]; }
    const std::vector<std::string>& aux_names() const { return aux_names_; }
    int max_label() const { return max_label_; }
    const std::filesystem::path& manifest_path() const { return manifest_path_; }

    std::array<std::size_t, 3> image_shape() const {
        const Tensor& img = samples_.front().image;
        return {img.dim(0), img.dim(1), img.dim(2)};
    }

    /// True when the first `count` canonical auxiliaries are all present.
    bool has_canonical_aux(std::size_t count) const {
        if (count > 4) return false;
        for (std::size_t i = 0; i < count; ++i) {
            bool found = false;
            for (const auto& n : aux_names_) found = found || n == kAuxNames[i];
            if (!found) return false;
        }
        return true;
    }

private:
    static void load_ranges(const std::filesystem::path& path,
                            std::map<std::string, std::pair<double, double>>& ranges) {
        std::ifstream f(path);
        if (!f) throw ValidationError("aux_ranges.csv not found: " + path.string());
        std::string line;
        std::getline(f, line);  // header
        std::size_t row_no = 1;
        while (std::getline(f, line)) {
            ++row_no;
            if (line.empty()) continue;
            auto fields = detail::split_csv_line(line);
            if (fields.size() != 3) {
                throw ValidationError("expected 3 columns at row " + std::to_string(row_no) + " of " + path.string());
            }
            ranges[fields[0]] = {std::strtod(fields[1].c_str(), nullptr), std::strtod(fields[2].c_str(), nullptr)};
        }
    }

    std::vector<Sample> samples_;
    std::vector<std::string> aux_names_;
    int max_label_ = 0;
    std::filesystem::path manifest_path_;
};

// ---- augmentation -------------------------------------------------------

struct AugmentPolicy {
    bool hflip = true;
    bool rotation = true;     // k * 90 degrees, k uniform in {0,1,2,3}
    bool elastic = true;
    double elastic_sigma = 2.0;   // displacement magnitude, image pixels
    double elastic_radius = 8.0;  // smoothing radius, image pixels
};

/// Mirrors the image and every raster auxiliary left-right. An involution:
/// applying it twice restores the sample bitwise.
inline Sample hflip_sample(const Sample& s) {
    Sample out = s;
    auto flip = [](Tensor& t, std::size_t planes, std::size_t h, std::size_t w) {
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w / 2; ++x) {
                    std::swap(t[(p * h + y) * w + x], t[(p * h + y) * w + (w - 1 - x)]);
                }
    };
    flip(out.image, out.image.dim(0), out.image.dim(1), out.image.dim(2));
    for (auto& [name, t] : out.aux) {
        if (t.rank() == 2) flip(t, 1, t.dim(0), t.dim(1));
    }
    return out;
}

/// Rotates the image and raster auxiliaries by k * 90 degrees
/// counterclockwise. Non-square inputs swap their dimensions.
inline Sample rot90_sample(const Sample& s, int k) {
    k = ((k % 4) + 4) % 4;
    Sample out = s;
    auto rot_once = [](const Tensor& t, std::size_t planes, std::size_t h, std::size_t w) {
        std::vector<std::size_t> shape = t.shape();
        shape[shape.size() - 2] = w;
        shape[shape.size() - 1] = h;
        Tensor r(shape);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < w; ++y)
                for (std::size_t x = 0; x < h; ++x) {
                    r[(p * w + y) * h + x] = t[(p * h + x) * w + (w - 1 - y)];
                }
        return r;
    };
    for (int i = 0; i < k; ++i) {
        out.image = rot_once(out.image, out.image.dim(0), out.image.dim(1), out.image.dim(2));
        for (auto& [name, t] : out.aux) {
            if (t.rank() == 2) t = rot_once(t, 1, t.dim(0), t.dim(1));
        }
    }
    return out;
}

/// Smoothed random displacement field with bilinear resampling. The field is
/// defined on a coarse grid sized by the smoothing radius (in image pixels)
/// and shared by the image and every raster auxiliary; displacements scale
/// with each raster's resolution so the warp geometry is identical. Zero
/// magnitude reproduces the input exactly.
inline Sample elastic_sample(const Sample& s, double sigma, double radius, std::uint64_t seed) {
    const std::size_t img_h = s.image.dim(1), img_w = s.image.dim(2);
    const std::size_t gy = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(img_h / std::max(radius, 1.0))));
    const std::size_t gx = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(img_w / std::max(radius, 1.0))));
    Rng rng(seed);
    std::vector<double> dy(gy * gx), dx(gy * gx);
    for (std::size_t i = 0; i < dy.size(); ++i) dy[i] = sigma * rng.normal();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = sigma * rng.normal();

    auto field_at = [&](const std::vector<double>& f, double u, double v) {
        // u, v in [0,1]
        const double fy = u * static_cast<double>(gy - 1);
        const double fx = v * static_cast<double>(gx - 1);
        const std::size_t y0 = std::min(static_cast<std::size_t>(fy), gy - 2);
        const std::size_t x0 = std::min(static_cast<std::size_t>(fx), gx - 2);
        const double ty = fy - static_cast<double>(y0);
        const double tx = fx - static_cast<double>(x0);
        return (1 - ty) * ((1 - tx) * f[y0 * gx + x0] + tx * f[y0 * gx + x0 + 1]) +
               ty * ((1 - tx) * f[(y0 + 1) * gx + x0] + tx * f[(y0 + 1) * gx + x0 + 1]);
    };

    auto warp = [&](const Tensor& t, std::size_t planes, std::size_t h, std::size_t w) {
        Tensor out(t.shape());
        const double sy = static_cast<double>(h) / static_cast<double>(img_h);
        const double sx = static_cast<double>(w) / static_cast<double>(img_w);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double u = h > 1 ? static_cast<double>(y) / static_cast<double>(h - 1) : 0.0;
                    const double v = w > 1 ? static_cast<double>(x) / static_cast<double>(w - 1) : 0.0;
                    double src_y = static_cast<double>(y) + field_at(dy, u, v) * sy;
                    double src_x = static_cast<double>(x) + field_at(dx, u, v) * sx;
                    src_y = std::min(std::max(src_y, 0.0), static_cast<double>(h - 1));
                    src_x = std::min(std::max(src_x, 0.0), static_cast<double>(w - 1));
                    const std::size_t y0 = std::min(static_cast<std::size_t>(src_y), h > 1 ? h - 2 : 0);
                    const std::size_t x0 = std::min(static_cast<std::size_t>(src_x), w > 1 ? w - 2 : 0);
                    const double ty = src_y - static_cast<double>(y0);
                    const double tx = src_x - static_cast<double>(x0);
                    const std::size_t y1 = h > 1 ? y0 + 1 : y0;
                    const std::size_t x1 = w > 1 ? x0 + 1 : x0;
                    const double v00 = t[(p * h + y0) * w + x0], v01 = t[(p * h + y0) * w + x1];
                    const double v10 = t[(p * h + y1) * w + x0], v11 = t[(p * h + y1) * w + x1];
                    out[(p * h + y) * w + x] =
                        (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
                }
        return out;
    };

    Sample out = s;
    out.image = warp(s.image, s.image.dim(0), img_h, img_w);
    for (auto& [name, t] : out.aux) {
        if (t.rank() == 2) t = warp(t, 1, t.dim(0), t.dim(1));
    }
    return out;
}

/// Seeded augmentation: horizontal flip with probability 1/2, rotation by a
/// uniform multiple of 90 degrees, then an elastic transform. Image and
/// raster auxiliaries move together; scalars and the label are untouched.
inline Sample augment(const Sample& s, const AugmentPolicy& policy, std::uint64_t seed) {
    Rng rng(mix_seed(seed, {0xA06}));
    Sample out = s;
    if (policy.hflip && rng.uniform() < 0.5) out = hflip_sample(out);
    if (policy.rotation) {
        const int k = static_cast<int>(rng.below(4));
        if (k != 0) out = rot90_sample(out, k);
    }
    if (policy.elastic && policy.elastic_sigma > 0.0) {
        out = elastic_sample(out, policy.elastic_sigma, policy.elastic_radius, mix_seed(seed, {0xE1A5}));
    }
    return out;
}

/// Epoch-seeded batch index partition: every sample appears exactly once, the
/// final short batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          std::uint64_t seed, std::uint64_t epoch) {
    if (n == 0) throw UsageError("make_batches: empty dataset");
    if (batch_size == 0) throw ConfigError("make_batches: batch_size must be positive");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, {0xBA7C4, epoch}));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

}  // namespace mscn
