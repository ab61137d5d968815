#include "openseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "openseg/errors.hpp"
#include "openseg/image_io.hpp"
#include "openseg/metrics.hpp"

namespace openseg {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using json = nlohmann::json;

const std::vector<std::string>& all_shape_names() {
    static const std::vector<std::string> names{"circle", "square", "triangle", "star", "cross", "ring"};
    return names;
}

ShapeKind shape_kind_from_name(const std::string& name) {
    const auto& names = all_shape_names();
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError("unknown shape class '" + name + "'");
    return static_cast<ShapeKind>(it - names.begin());
}

void SceneSpec::validate() const {
    if (image_size < 16) throw ConfigError("data.image_size must be >= 16");
    if (min_instances < 1 || max_instances < min_instances)
        throw ConfigError("data.n_instances must satisfy 1 <= min <= max");
    if (shape_classes.empty()) throw ConfigError("data.shape_classes must be nonempty");
    std::set<std::string> seen;
    for (const auto& s : shape_classes) {
        shape_kind_from_name(s);
        if (!seen.insert(s).second) throw ConfigError("data.shape_classes lists '" + s + "' twice");
    }
    if (palette.empty()) throw ConfigError("data.palette must be nonempty");
    if (background_noise < 0.0 || background_noise > 1.0) throw ConfigError("data.background_noise must be in [0, 1]");
    if (min_size < 4 || max_size < min_size || max_size >= image_size)
        throw ConfigError("data shape size range must satisfy 4 <= min_size <= max_size < image_size");
}

ClassVocabulary SceneSpec::vocabulary() const { return ClassVocabulary(shape_classes); }

Tensor Sample::semantic() const {
    auto sem = torch::full({image.size(1), image.size(2)}, kNoClass, torch::kLong);
    for (int i = 0; i < num_instances(); ++i) sem.masked_fill_(masks[i].to(torch::kBool), class_ids[static_cast<std::size_t>(i)]);
    return sem;
}

std::vector<int> Sample::classes() const {
    std::vector<int> c(class_ids);
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
    return c;
}

std::vector<Tensor> Sample::masks_of(int class_id) const {
    std::vector<Tensor> out;
    for (int i = 0; i < num_instances(); ++i) {
        if (class_ids[static_cast<std::size_t>(i)] == class_id) out.push_back(masks[i]);
    }
    return out;
}

std::vector<int> Dataset::hosts_of(int class_id, const std::vector<int>& split) const {
    std::vector<int> out;
    for (int idx : split) {
        const auto& ids = samples[static_cast<std::size_t>(idx)].class_ids;
        if (std::find(ids.begin(), ids.end(), class_id) != ids.end()) out.push_back(idx);
    }
    return out;
}

namespace {

Tensor polygon_mask(const Tensor& xs, const Tensor& ys, const std::vector<std::pair<double, double>>& poly) {
    // even-odd crossing test, vectorized over pixels
    auto inside = torch::zeros_like(xs, torch::kBool);
    const std::size_t n = poly.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const auto [xi, yi] = poly[i];
        const auto [xj, yj] = poly[j];
        if (yi == yj) continue;
        auto crosses = (ys.gt(yi) != ys.gt(yj)) & xs.lt((xj - xi) * (ys - yi) / (yj - yi) + xi);
        inside = inside ^ crosses;
    }
    return inside;
}

std::vector<std::pair<double, double>> regular_points(double cx, double cy, const std::vector<double>& radii,
                                                      double angle, int count) {
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < count; ++i) {
        const double a = angle - M_PI / 2.0 + 2.0 * M_PI * i / count;
        const double r = radii[static_cast<std::size_t>(i) % radii.size()];
        pts.emplace_back(cx + r * std::cos(a), cy + r * std::sin(a));
    }
    return pts;
}

}  // namespace

Tensor render_shape(ShapeKind kind, double cx, double cy, double radius, double angle, int size) {
    auto coords = torch::arange(size, torch::kFloat64) + 0.5;
    auto ys = coords.view({size, 1}).expand({size, size});
    auto xs = coords.view({1, size}).expand({size, size});
    auto dx = xs - cx, dy = ys - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    auto u = dx * c + dy * s;   // rotated frame
    auto v = -dx * s + dy * c;
    auto dist = (dx * dx + dy * dy).sqrt();
    Tensor m;
    switch (kind) {
        case ShapeKind::Circle: m = dist <= radius; break;
        case ShapeKind::Square: {
            const double half = radius * 0.8;
            m = (u.abs() <= half) & (v.abs() <= half);
            break;
        }
        case ShapeKind::Triangle: m = polygon_mask(xs, ys, regular_points(cx, cy, {radius}, angle, 3)); break;
        case ShapeKind::Star: m = polygon_mask(xs, ys, regular_points(cx, cy, {radius, radius * 0.45}, angle, 10)); break;
        case ShapeKind::Cross: {
            const double arm = radius * 0.33;
            m = ((u.abs() <= radius) & (v.abs() <= arm)) | ((v.abs() <= radius) & (u.abs() <= arm));
            break;
        }
        case ShapeKind::Ring: m = (dist <= radius) & (dist >= radius * 0.55); break;
    }
    return m.to(torch::kUInt8);
}

namespace {

Tensor dilate(const Tensor& mask, int pixels) {
    auto f = mask.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
    auto d = F::max_pool2d(f, F::MaxPool2dFuncOptions(2 * pixels + 1).stride(1).padding(pixels));
    return d.squeeze(0).squeeze(0).to(torch::kUInt8);
}

Tensor render_background(const SceneSpec& spec, Rng& rng) {
    const int s = spec.image_size;
    const double base = rng.uniform(0.05, 0.35);
    // noise drawn from the scene stream so the image depends only on (spec, index)
    std::vector<float> noise(static_cast<std::size_t>(3 * s * s));
    for (auto& n : noise) n = static_cast<float>(rng.uniform(-spec.background_noise, spec.background_noise));
    auto img = torch::from_blob(noise.data(), {3, s, s}, torch::kFloat32).clone() + static_cast<float>(base);
    return img;
}

struct Placement {
    int class_index;
    double cx, cy, radius, angle;
    std::array<std::uint8_t, 3> color;
};

Placement draw_placement(const SceneSpec& spec, Rng& rng, int class_index) {
    Placement p;
    p.class_index = class_index;
    const double diameter = rng.uniform(spec.min_size, spec.max_size);
    p.radius = diameter / 2.0;
    p.cx = rng.uniform(p.radius + 1.0, spec.image_size - p.radius - 1.0);
    p.cy = rng.uniform(p.radius + 1.0, spec.image_size - p.radius - 1.0);
    p.angle = spec.rotate ? rng.uniform(0.0, 2.0 * M_PI) : 0.0;
    p.color = spec.palette[static_cast<std::size_t>(rng.index(static_cast<int>(spec.palette.size())))];
    return p;
}

void paint(Tensor& image, const Tensor& mask, const std::array<std::uint8_t, 3>& color, Rng& rng, double noise) {
    auto m = mask.to(torch::kBool);
    for (int ch = 0; ch < 3; ++ch) {
        // slight per-instance shade jitter keeps color a nuisance variable
        const double value = std::clamp(color[static_cast<std::size_t>(ch)] / 255.0 + rng.uniform(-0.08, 0.08), 0.0, 1.0);
        auto plane = image[ch];
        auto shaded = torch::full_like(plane, static_cast<float>(value)) + (plane - plane.mean()) * static_cast<float>(noise > 0 ? 0.5 : 0.0);
        plane.copy_(torch::where(m, shaded, plane));
    }
}

}  // namespace

Sample render_scene(const SceneSpec& spec, int index, int* skipped) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(index)}));
    const int s = spec.image_size;
    Sample sample;
    sample.image_id = index;
    sample.image = render_background(spec, rng);
    const int n = rng.range(spec.min_instances, spec.max_instances);
    std::vector<Tensor> masks;
    auto occupied = torch::zeros({s, s}, torch::kUInt8);
    int skip = 0;
    for (int k = 0; k < n; ++k) {
        const int cls = rng.index(static_cast<int>(spec.shape_classes.size()));
        const auto kind = shape_kind_from_name(spec.shape_classes[static_cast<std::size_t>(cls)]);
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            auto p = draw_placement(spec, rng, cls);
            auto mask = render_shape(kind, p.cx, p.cy, p.radius, p.angle, s);
            if (mask.sum().item<std::int64_t>() == 0) continue;
            if (!spec.overlap_allowed && (dilate(mask, 2) & occupied).any().item<bool>()) continue;
            if (spec.overlap_allowed) {
                // the new shape occludes earlier ones
                for (auto& prev : masks) prev = prev & (1 - mask);
            }
            paint(sample.image, mask, p.color, rng, spec.background_noise);
            occupied = occupied | mask;
            masks.push_back(mask);
            sample.class_ids.push_back(cls);
            placed = true;
        }
        if (!placed) {
            ++skip;
            std::cerr << "warning: scene " << index << ": could not place instance " << k << " after 100 attempts\n";
        }
    }
    // drop instances fully hidden by later ones
    std::vector<Tensor> kept;
    std::vector<int> kept_classes;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i].sum().item<std::int64_t>() > 0) {
            kept.push_back(masks[i]);
            kept_classes.push_back(sample.class_ids[i]);
        }
    }
    sample.class_ids = kept_classes;
    sample.masks = kept.empty() ? torch::zeros({0, s, s}, torch::kUInt8) : torch::stack(kept, 0);
    sample.instance_ids.resize(kept.size());
    std::iota(sample.instance_ids.begin(), sample.instance_ids.end(), 0);
    // quantize exactly as the PNG writer will, so in-memory and on-disk data agree
    sample.image = to_float_image(to_uint8_image(sample.image));
    if (skipped) *skipped = skip;
    return sample;
}

std::vector<int> validation_indices(int n_images, int n_val) {
    if (n_val < 0) n_val = static_cast<int>(std::lround(0.1 * n_images));
    n_val = std::clamp(n_val, 0, n_images);
    std::vector<int> idx(static_cast<std::size_t>(n_images));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [](int a, int b) {
        return splitmix64(static_cast<std::uint64_t>(a)) < splitmix64(static_cast<std::uint64_t>(b));
    });
    idx.resize(static_cast<std::size_t>(n_val));
    std::sort(idx.begin(), idx.end());
    return idx;
}

namespace {

std::string image_stem(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", index);
    return buf;
}

}  // namespace

Dataset generate_in_memory(const SceneSpec& spec, int n_images, int n_val) {
    if (n_images < 1) throw ConfigError("n_images must be >= 1");
    spec.validate();
    Dataset ds;
    ds.vocab = spec.vocabulary();
    const auto val = validation_indices(n_images, n_val);
    std::set<int> val_set(val.begin(), val.end());
    for (int i = 0; i < n_images; ++i) {
        ds.samples.push_back(render_scene(spec, i));
        (val_set.count(i) ? ds.val : ds.train).push_back(i);
    }
    return ds;
}

GenerateReport generate_dataset(const SceneSpec& spec, int n_images, const fs::path& out, int n_val) {
    if (n_images < 1) throw ConfigError("n_images must be >= 1");
    spec.validate();
    fs::create_directories(out / "images");
    fs::create_directories(out / "masks");
    const auto val = validation_indices(n_images, n_val);
    std::set<int> val_set(val.begin(), val.end());
    GenerateReport report;
    json images = json::array();
    for (int i = 0; i < n_images; ++i) {
        int skipped = 0;
        auto sample = render_scene(spec, i, &skipped);
        report.skipped += skipped;
        const auto stem = image_stem(i);
        write_png(out / "images" / (stem + ".png"), to_uint8_image(sample.image));
        json instances = json::array();
        for (int k = 0; k < sample.num_instances(); ++k) {
            const auto mask_file = "masks/" + stem + "_" + std::to_string(k) + ".png";
            write_png(out / mask_file, (sample.masks[k] * 255).unsqueeze(0).to(torch::kUInt8));
            const auto& name = spec.shape_classes[static_cast<std::size_t>(sample.class_ids[static_cast<std::size_t>(k)])];
            instances.push_back({{"mask", mask_file}, {"class", name}, {"instance_id", sample.instance_ids[static_cast<std::size_t>(k)]}});
            report.per_class[name] += 1;
            report.instances += 1;
        }
        const bool is_val = val_set.count(i) > 0;
        (is_val ? report.val : report.train) += 1;
        images.push_back({{"id", i}, {"file", "images/" + stem + ".png"}, {"split", is_val ? "val" : "train"},
                          {"instances", instances}});
    }
    report.images = n_images;
    json index = {{"format", "openseg-synthetic"}, {"version", 1}, {"image_size", spec.image_size},
                  {"classes", spec.shape_classes}, {"images", images}};
    std::ofstream(out / "annotations.json") << index.dump(1) << "\n";
    std::ofstream vocab(out / "vocab.txt");
    for (const auto& name : spec.shape_classes) vocab << name << "\n";
    return report;
}

Dataset load_dataset(const fs::path& path) {
    if (!fs::exists(path / "annotations.json")) throw IntegrityError("missing annotations.json in '" + path.string() + "'");
    if (!fs::exists(path / "vocab.txt")) throw IntegrityError("missing vocab.txt in '" + path.string() + "'");
    Dataset ds;
    {
        std::ifstream in(path / "vocab.txt");
        std::vector<std::string> names;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) names.push_back(line);
        }
        ds.vocab = ClassVocabulary(names);
    }
    json index;
    try {
        std::ifstream in(path / "annotations.json");
        index = json::parse(in);
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("annotations.json: ") + e.what());
    }
    if (!index.contains("images") || !index["images"].is_array()) throw IntegrityError("annotations.json: no image list");
    for (const auto& entry : index["images"]) {
        for (const char* key : {"id", "file", "split", "instances"}) {
            if (!entry.contains(key)) throw IntegrityError(std::string("annotations.json: image entry without '") + key + "'");
        }
        Sample s;
        s.image_id = entry["id"].get<int>();
        const auto file = path / entry["file"].get<std::string>();
        if (!fs::exists(file)) throw IntegrityError("missing image file '" + file.string() + "'");
        s.image = to_float_image(read_png(file));
        std::vector<Tensor> masks;
        for (const auto& inst : entry["instances"]) {
            for (const char* key : {"mask", "class", "instance_id"}) {
                if (!inst.contains(key)) throw IntegrityError(std::string("annotations.json: instance without '") + key + "'");
            }
            const auto mfile = path / inst["mask"].get<std::string>();
            if (!fs::exists(mfile)) throw IntegrityError("missing mask file '" + mfile.string() + "'");
            auto m = (read_png(mfile)[0] > 127).to(torch::kUInt8);
            if (m.sizes() != s.image.sizes().slice(1)) throw IntegrityError("mask '" + mfile.string() + "' has the wrong size");
            if (m.sum().item<std::int64_t>() == 0) throw IntegrityError("mask '" + mfile.string() + "' is empty");
            masks.push_back(m);
            try {
                s.class_ids.push_back(ds.vocab.id_of(inst["class"].get<std::string>()));
            } catch (const VocabularyError& e) {
                throw IntegrityError(std::string("annotations.json: ") + e.what());
            }
            s.instance_ids.push_back(inst["instance_id"].get<int>());
        }
        s.masks = masks.empty() ? torch::zeros({0, s.image.size(1), s.image.size(2)}, torch::kUInt8) : torch::stack(masks, 0);
        const int idx = static_cast<int>(ds.samples.size());
        const auto split = entry["split"].get<std::string>();
        if (split == "val") ds.val.push_back(idx);
        else if (split == "train") ds.train.push_back(idx);
        else throw IntegrityError("annotations.json: unknown split '" + split + "'");
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

Sample flip_horizontal(const Sample& sample) {
    Sample out = sample;
    out.image = sample.image.flip({2}).contiguous();
    out.masks = sample.masks.flip({2}).contiguous();
    return out;
}

Sample scale_and_crop(const Sample& sample, double scale, int top, int left, int crop_size, int min_visible_area) {
    const auto h = sample.image.size(1), w = sample.image.size(2);
    const auto nh = std::max<std::int64_t>(1, std::llround(h * scale));
    const auto nw = std::max<std::int64_t>(1, std::llround(w * scale));
    // nearest-exact: output pixel i samples input floor((i + 0.5) * in / out)
    auto source_index = [](std::int64_t out, std::int64_t in) {
        return ((torch::arange(out, torch::kFloat64) + 0.5) * (static_cast<double>(in) / out)).floor().clamp_max(in - 1).to(torch::kLong);
    };
    auto resize = [&](const Tensor& t) {
        if (nh == h && nw == w) return t.to(torch::kFloat32);
        return t.to(torch::kFloat32).index_select(1, source_index(nh, h)).index_select(2, source_index(nw, w));
    };
    auto crop = [&](const Tensor& t) {
        auto out = torch::zeros({t.size(0), crop_size, crop_size}, t.options());
        const auto y0 = std::max<std::int64_t>(0, top), x0 = std::max<std::int64_t>(0, left);
        const auto y1 = std::min<std::int64_t>(t.size(1), top + crop_size);
        const auto x1 = std::min<std::int64_t>(t.size(2), left + crop_size);
        if (y1 > y0 && x1 > x0) {
            out.narrow(1, y0 - top, y1 - y0)
                .narrow(2, x0 - left, x1 - x0)
                .copy_(t.narrow(1, y0, y1 - y0).narrow(2, x0, x1 - x0));
        }
        return out;
    };
    Sample out;
    out.image_id = sample.image_id;
    out.image = crop(resize(sample.image));
    Tensor masks = sample.num_instances() > 0 ? crop(resize(sample.masks)) : torch::zeros({0, crop_size, crop_size});
    std::vector<Tensor> kept;
    for (int i = 0; i < sample.num_instances(); ++i) {
        auto m = (masks[i] > 0.5).to(torch::kUInt8);
        if (m.sum().item<std::int64_t>() < min_visible_area) continue;
        kept.push_back(m);
        out.class_ids.push_back(sample.class_ids[static_cast<std::size_t>(i)]);
        out.instance_ids.push_back(sample.instance_ids[static_cast<std::size_t>(i)]);
    }
    out.masks = kept.empty() ? torch::zeros({0, crop_size, crop_size}, torch::kUInt8) : torch::stack(kept, 0);
    return out;
}

Sample augment(const Sample& sample, Rng& rng, const AugmentConfig& config) {
    const bool flip = rng.bernoulli(config.flip_probability);
    const double scale = rng.uniform(config.scale_lo, config.scale_hi);
    const auto nh = std::max<std::int64_t>(1, std::llround(sample.height() * scale));
    const auto nw = std::max<std::int64_t>(1, std::llround(sample.width() * scale));
    const int top = nh > config.crop_size ? rng.range(0, static_cast<int>(nh) - config.crop_size) : 0;
    const int left = nw > config.crop_size ? rng.range(0, static_cast<int>(nw) - config.crop_size) : 0;
    const Sample& base = sample;
    return scale_and_crop(flip ? flip_horizontal(base) : base, scale, top, left, config.crop_size,
                          config.min_visible_area);
}

SyntheticVideo generate_video(const SceneSpec& spec, int n_frames, double max_speed, std::uint64_t seed) {
    spec.validate();
    if (n_frames < 1) throw ConfigError("video needs at least one frame");
    Rng rng(derive_seed(seed, {0x766964656fULL}));
    const int s = spec.image_size;
    struct Track {
        Placement start;
        ShapeKind kind;
        double vx, vy;
    };
    std::vector<Track> tracks;
    auto occupied = torch::zeros({s, s}, torch::kUInt8);
    const int n = rng.range(spec.min_instances, spec.max_instances);
    const double span = max_speed * (n_frames - 1);
    for (int k = 0; k < n; ++k) {
        const int cls = rng.index(static_cast<int>(spec.shape_classes.size()));
        const auto kind = shape_kind_from_name(spec.shape_classes[static_cast<std::size_t>(cls)]);
        for (int attempt = 0; attempt < 200; ++attempt) {
            auto p = draw_placement(spec, rng, cls);
            const double vx = rng.uniform(-max_speed, max_speed), vy = rng.uniform(-max_speed, max_speed);
            const double ex = p.cx + vx * (n_frames - 1), ey = p.cy + vy * (n_frames - 1);
            if (ex < p.radius + 1 || ex > s - p.radius - 1 || ey < p.radius + 1 || ey > s - p.radius - 1) continue;
            // swept area over the whole clip must not touch other objects
            auto swept = torch::zeros({s, s}, torch::kUInt8);
            for (int f = 0; f < n_frames; ++f)
                swept = swept | render_shape(kind, p.cx + vx * f, p.cy + vy * f, p.radius, p.angle, s);
            if ((dilate(swept, 2) & occupied).any().item<bool>()) continue;
            occupied = occupied | swept;
            tracks.push_back({p, kind, vx, vy});
            break;
        }
    }
    (void)span;
    if (tracks.empty()) throw SamplingError("could not place any object in the synthetic video");
    SyntheticVideo video;
    for (std::size_t k = 0; k < tracks.size(); ++k) {
        video.object_ids.push_back(static_cast<int>(k));
        video.class_ids.push_back(tracks[k].start.class_index);
    }
    for (int f = 0; f < n_frames; ++f) {
        Rng frame_rng(derive_seed(seed, {static_cast<std::uint64_t>(f) + 1}));
        auto img = render_background(spec, frame_rng);
        std::vector<Tensor> masks;
        for (const auto& t : tracks) {
            auto m = render_shape(t.kind, t.start.cx + t.vx * f, t.start.cy + t.vy * f, t.start.radius, t.start.angle, s);
            paint(img, m, t.start.color, frame_rng, spec.background_noise);
            masks.push_back(m);
        }
        video.frames.push_back(to_float_image(to_uint8_image(img)));
        video.masks.push_back(torch::stack(masks, 0));
    }
    return video;
}

}  // namespace openseg
