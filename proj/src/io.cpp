#include "epns/io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "epns/train.hpp"

namespace epns {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'E', 'P', 'N', 'S'};
constexpr std::uint8_t kDtypeF64 = 0;
constexpr std::uint8_t kDtypeU16 = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u16(std::ostream& os, std::uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }
void put_u8(std::ostream& os, std::uint8_t v) { os.write(reinterpret_cast<const char*>(&v), 1); }

std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint16_t get_u16(std::istream& is) {
    std::uint16_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 2);
    return v;
}
std::uint8_t get_u8(std::istream& is) {
    std::uint8_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 1);
    return v;
}

struct TrajHeader {
    std::uint8_t dtype = 0;
    std::vector<std::uint32_t> dims;
    std::uint32_t frames = 0;
};

void write_header(std::ostream& os, const TrajHeader& h) {
    os.write(kMagic, 4);
    put_u32(os, kTrajectoryFormatVersion);
    put_u8(os, h.dtype);
    put_u8(os, static_cast<std::uint8_t>(h.dims.size()));
    put_u16(os, 0);
    put_u32(os, h.frames);
    for (std::uint32_t d : h.dims) put_u32(os, d);
}

TrajHeader read_header(std::istream& is, const fs::path& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not an EPNS trajectory file: " + path.string());
    const std::uint32_t version = get_u32(is);
    if (version != kTrajectoryFormatVersion)
        throw IoError("trajectory format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kTrajectoryFormatVersion) + "); regenerate the dataset with this build");
    TrajHeader h;
    h.dtype = get_u8(is);
    const int ndim = get_u8(is);
    (void)get_u16(is);
    h.frames = get_u32(is);
    for (int i = 0; i < ndim; ++i) h.dims.push_back(get_u32(is));
    if (!is) throw IoError("truncated trajectory header: " + path.string());
    return h;
}

std::int64_t frame_elems(const TrajHeader& h) {
    std::int64_t n = 1;
    for (std::uint32_t d : h.dims) n *= d;
    return n;
}

void check_exact_size(const fs::path& path, const TrajHeader& h, std::size_t elem_bytes) {
    const std::uintmax_t expect = 16 + 4 * h.dims.size() +
                                  static_cast<std::uintmax_t>(h.frames) * frame_elems(h) * elem_bytes;
    const std::uintmax_t actual = fs::file_size(path);
    if (actual != expect)
        throw IoError("trajectory file size mismatch for " + path.string() + ": expected " + std::to_string(expect) +
                      " bytes, found " + std::to_string(actual));
}

} // namespace

void write_nbody_trajectory(const fs::path& path, const NBodyTrajectory& traj) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    const int n = traj.frames.front().n();
    TrajHeader h;
    h.dtype = kDtypeF64;
    h.dims = {static_cast<std::uint32_t>(n), 6};
    h.frames = static_cast<std::uint32_t>(traj.frames.size());
    write_header(os, h);
    std::vector<double> buf(static_cast<std::size_t>(n) * 6);
    for (const auto& f : traj.frames) {
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < 3; ++k) {
                buf[static_cast<std::size_t>(i) * 6 + k] = f.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
                buf[static_cast<std::size_t>(i) * 6 + 3 + k] = f.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
            }
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
    }
    if (!os) throw IoError("write failure: " + path.string());
}

NBodyTrajectory read_nbody_trajectory(const fs::path& path, const std::vector<double>& masses) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    const TrajHeader h = read_header(is, path);
    if (h.dtype != kDtypeF64 || h.dims.size() != 2 || h.dims[1] != 6)
        throw IoError("not a celestial trajectory: " + path.string());
    check_exact_size(path, h, sizeof(double));
    const int n = static_cast<int>(h.dims[0]);
    if (static_cast<int>(masses.size()) != n) throw IoError("mass table does not match body count in " + path.string());
    NBodyTrajectory traj;
    traj.frame_interval = 0.1;
    std::vector<double> buf(static_cast<std::size_t>(n) * 6);
    for (std::uint32_t f = 0; f < h.frames; ++f) {
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
        if (!is) throw IoError("truncated trajectory body: " + path.string());
        BodyState s;
        s.masses = masses;
        s.positions.resize(static_cast<std::size_t>(n));
        s.velocities.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < 3; ++k) {
                s.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = buf[static_cast<std::size_t>(i) * 6 + k];
                s.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = buf[static_cast<std::size_t>(i) * 6 + 3 + k];
            }
        traj.frames.push_back(std::move(s));
    }
    return traj;
}

void write_cpm_trajectory(const fs::path& path, const CpmTrajectory& traj) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    const Lattice& first = traj.frames.front();
    TrajHeader h;
    h.dtype = kDtypeU16;
    h.dims = {static_cast<std::uint32_t>(first.h), static_cast<std::uint32_t>(first.w)};
    h.frames = static_cast<std::uint32_t>(traj.frames.size());
    write_header(os, h);
    for (const auto& f : traj.frames)
        os.write(reinterpret_cast<const char*>(f.sites.data()),
                 static_cast<std::streamsize>(f.sites.size() * sizeof(std::uint16_t)));
    if (!os) throw IoError("write failure: " + path.string());
}

CpmTrajectory read_cpm_trajectory(const fs::path& path, const std::vector<std::uint8_t>& cell_types) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    const TrajHeader h = read_header(is, path);
    if (h.dtype != kDtypeU16 || h.dims.size() != 2) throw IoError("not a cellular trajectory: " + path.string());
    check_exact_size(path, h, sizeof(std::uint16_t));
    CpmTrajectory traj;
    traj.cell_types = cell_types;
    for (std::uint32_t f = 0; f < h.frames; ++f) {
        Lattice lat;
        lat.h = static_cast<int>(h.dims[0]);
        lat.w = static_cast<int>(h.dims[1]);
        lat.cell_types = cell_types;
        lat.frame_index = static_cast<int>(f);
        lat.sites.resize(static_cast<std::size_t>(lat.h) * lat.w);
        is.read(reinterpret_cast<char*>(lat.sites.data()),
                static_cast<std::streamsize>(lat.sites.size() * sizeof(std::uint16_t)));
        if (!is) throw IoError("truncated trajectory body: " + path.string());
        traj.frames.push_back(std::move(lat));
    }
    return traj;
}

std::uint64_t file_checksum(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char buf[65536];
    std::uint64_t h = 0xcbf29ce484222325ULL;
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a(buf, static_cast<std::size_t>(is.gcount()), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

namespace {

json nbody_cfg_json(const NBodyConfig& c) {
    return json{{"n", c.n},
                {"grav_const", c.grav_const},
                {"softening", c.softening},
                {"noise_scale", c.noise_scale},
                {"dt", c.dt},
                {"steps_per_frame", c.steps_per_frame},
                {"frames", c.frames},
                {"mass_lo", c.mass_lo},
                {"mass_hi", c.mass_hi},
                {"ball_radius", c.ball_radius},
                {"min_separation", c.min_separation},
                {"velocity_jitter", c.velocity_jitter},
                {"energy_jump_limit", c.energy_jump_limit}};
}

NBodyConfig nbody_cfg_from_json(const json& j) {
    NBodyConfig c;
    c.n = j.at("n");
    c.grav_const = j.at("grav_const");
    c.softening = j.at("softening");
    c.noise_scale = j.at("noise_scale");
    c.dt = j.at("dt");
    c.steps_per_frame = j.at("steps_per_frame");
    c.frames = j.at("frames");
    c.mass_lo = j.at("mass_lo");
    c.mass_hi = j.at("mass_hi");
    c.ball_radius = j.at("ball_radius");
    c.min_separation = j.at("min_separation");
    c.velocity_jitter = j.at("velocity_jitter");
    c.energy_jump_limit = j.at("energy_jump_limit");
    return c;
}

json cpm_cfg_json(const CPMConfig& c) {
    return json{{"h", c.h},
                {"w", c.w},
                {"n_cells", c.n_cells},
                {"n_types", c.n_types},
                {"contact", c.contact},
                {"target_volume", c.target_volume},
                {"volume_weight", c.volume_weight},
                {"temperature", c.temperature},
                {"mcs_per_frame", c.mcs_per_frame},
                {"frames", c.frames},
                {"burn_in_mcs", c.burn_in_mcs}};
}

CPMConfig cpm_cfg_from_json(const json& j) {
    CPMConfig c;
    c.h = j.at("h");
    c.w = j.at("w");
    c.n_cells = j.at("n_cells");
    c.n_types = j.at("n_types");
    c.contact = j.at("contact").get<std::vector<double>>();
    c.target_volume = j.at("target_volume");
    c.volume_weight = j.at("volume_weight");
    c.temperature = j.at("temperature");
    c.mcs_per_frame = j.at("mcs_per_frame");
    c.frames = j.at("frames");
    c.burn_in_mcs = j.at("burn_in_mcs");
    return c;
}

constexpr std::uint64_t kTrajStream = 0x7472616aULL;

struct SplitPlan {
    std::string name;
    int count;
    std::uint64_t base_index;
};

std::vector<SplitPlan> split_plans(const SplitCounts& counts) {
    return {{"train", counts.train, 0},
            {"val", counts.val, 1u << 20},
            {"test", counts.test, 2u << 20}};
}

std::string traj_filename(const std::string& split, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d.bin", split.c_str(), i);
    return buf;
}

} // namespace

void generate_celestial_dataset(const fs::path& dir, const NBodyConfig& cfg, const SplitCounts& counts,
                                std::uint64_t seed, int workers) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = 1;
    manifest["system"] = "celestial";
    manifest["frame_interval"] = cfg.dt * cfg.steps_per_frame;
    manifest["seed"] = seed;
    manifest["config"] = nbody_cfg_json(cfg);

    for (const auto& plan : split_plans(counts)) {
        std::vector<NBodyTrajectory> trajs(static_cast<std::size_t>(plan.count));
        detail::run_partitioned(plan.count, workers, [&](int i, int) {
            const std::uint64_t traj_seed = derive_seed(seed, {kTrajStream, plan.base_index + static_cast<std::uint64_t>(i)});
            Rng rng(traj_seed);
            trajs[static_cast<std::size_t>(i)] = generate_trajectory(cfg, rng);
            trajs[static_cast<std::size_t>(i)].seed = traj_seed;
        });
        json entries = json::array();
        for (int i = 0; i < plan.count; ++i) {
            const std::string fname = traj_filename(plan.name, i);
            write_nbody_trajectory(dir / fname, trajs[static_cast<std::size_t>(i)]);
            json e;
            e["file"] = fname;
            e["seed"] = trajs[static_cast<std::size_t>(i)].seed;
            e["checksum"] = file_checksum(dir / fname);
            e["masses"] = trajs[static_cast<std::size_t>(i)].frames.front().masses;
            entries.push_back(std::move(e));
        }
        manifest["splits"][plan.name] = std::move(entries);
    }
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << "\n";
    if (!os) throw IoError("cannot write manifest in " + dir.string());
}

void generate_cellular_dataset(const fs::path& dir, const CPMConfig& cfg, const SplitCounts& counts,
                               std::uint64_t seed, int workers) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = 1;
    manifest["system"] = "cellular";
    manifest["frame_interval"] = 1.0;
    manifest["seed"] = seed;
    manifest["config"] = cpm_cfg_json(cfg);

    for (const auto& plan : split_plans(counts)) {
        std::vector<CpmTrajectory> trajs(static_cast<std::size_t>(plan.count));
        detail::run_partitioned(plan.count, workers, [&](int i, int) {
            const std::uint64_t traj_seed = derive_seed(seed, {kTrajStream, plan.base_index + static_cast<std::uint64_t>(i)});
            Rng rng(traj_seed);
            trajs[static_cast<std::size_t>(i)] = generate_cell_sorting_trajectory(cfg, rng);
            trajs[static_cast<std::size_t>(i)].seed = traj_seed;
        });
        json entries = json::array();
        for (int i = 0; i < plan.count; ++i) {
            const std::string fname = traj_filename(plan.name, i);
            write_cpm_trajectory(dir / fname, trajs[static_cast<std::size_t>(i)]);
            json e;
            e["file"] = fname;
            e["seed"] = trajs[static_cast<std::size_t>(i)].seed;
            e["checksum"] = file_checksum(dir / fname);
            e["cell_types"] = trajs[static_cast<std::size_t>(i)].cell_types;
            entries.push_back(std::move(e));
        }
        manifest["splits"][plan.name] = std::move(entries);
    }
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << "\n";
    if (!os) throw IoError("cannot write manifest in " + dir.string());
}

namespace {

json load_manifest(const fs::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("no manifest.json in " + dir.string());
    json m;
    try {
        is >> m;
    } catch (const json::exception& e) {
        throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    return m;
}

void check_entry_checksum(const fs::path& dir, const json& entry) {
    const fs::path file = dir / entry.at("file").get<std::string>();
    const std::uint64_t expect = entry.at("checksum");
    const std::uint64_t actual = file_checksum(file);
    if (expect != actual)
        throw IoError("checksum mismatch for " + file.string() + ": manifest " + std::to_string(expect) +
                      ", file " + std::to_string(actual));
}

} // namespace

std::string dataset_system(const fs::path& dir) { return load_manifest(dir).at("system"); }

CelestialDataset load_celestial_dataset(const fs::path& dir) {
    const json m = load_manifest(dir);
    if (m.at("system") != "celestial") throw IoError(dir.string() + " is not a celestial dataset");
    CelestialDataset ds;
    ds.cfg = nbody_cfg_from_json(m.at("config"));
    for (const auto& [name, target] : {std::pair<std::string, std::vector<NBodyTrajectory>*>{"train", &ds.train},
                                       {"val", &ds.val},
                                       {"test", &ds.test}}) {
        if (!m.at("splits").contains(name)) continue;
        for (const auto& entry : m.at("splits").at(name)) {
            check_entry_checksum(dir, entry);
            NBodyTrajectory t = read_nbody_trajectory(dir / entry.at("file").get<std::string>(),
                                                      entry.at("masses").get<std::vector<double>>());
            t.seed = entry.at("seed");
            target->push_back(std::move(t));
        }
    }
    return ds;
}

CellularDataset load_cellular_dataset(const fs::path& dir) {
    const json m = load_manifest(dir);
    if (m.at("system") != "cellular") throw IoError(dir.string() + " is not a cellular dataset");
    CellularDataset ds;
    ds.cfg = cpm_cfg_from_json(m.at("config"));
    for (const auto& [name, target] : {std::pair<std::string, std::vector<CpmTrajectory>*>{"train", &ds.train},
                                       {"val", &ds.val},
                                       {"test", &ds.test}}) {
        if (!m.at("splits").contains(name)) continue;
        for (const auto& entry : m.at("splits").at(name)) {
            check_entry_checksum(dir, entry);
            CpmTrajectory t = read_cpm_trajectory(dir / entry.at("file").get<std::string>(),
                                                  entry.at("cell_types").get<std::vector<std::uint8_t>>());
            t.seed = entry.at("seed");
            target->push_back(std::move(t));
        }
    }
    return ds;
}

std::vector<TrajectoryData<BodyState>> training_data(const std::vector<NBodyTrajectory>& trajs) {
    std::vector<TrajectoryData<BodyState>> out;
    out.reserve(trajs.size());
    for (const auto& t : trajs) out.push_back({t.frames, t.seed});
    return out;
}

std::vector<TrajectoryData<Lattice>> training_data(const std::vector<CpmTrajectory>& trajs) {
    std::vector<TrajectoryData<Lattice>> out;
    out.reserve(trajs.size());
    for (const auto& t : trajs) out.push_back({t.frames, t.seed});
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'E', 'P', 'N', 'C'};

void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
    const std::uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

void put_doubles(std::ostream& os, const std::vector<double>& v) {
    put_u32(os, static_cast<std::uint32_t>(v.size()));
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> get_doubles(std::istream& is) {
    const std::uint32_t n = get_u32(is);
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    return v;
}

} // namespace

void save_checkpoint(const fs::path& path, const ParamStore& params, const AdamState& adam, int epoch,
                     double best_val_elbo, const std::string& config_json) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(kCkptMagic, 4);
    put_u32(os, 1); // checkpoint format version
    put_string(os, config_json);
    put_u32(os, static_cast<std::uint32_t>(epoch));
    os.write(reinterpret_cast<const char*>(&best_val_elbo), sizeof(double));
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        put_string(os, params.name(i));
        const Tensor& t = params.tensor(i);
        put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.dims()) put_u32(os, static_cast<std::uint32_t>(d));
        put_doubles(os, t.data());
    }
    const bool has_adam = adam.initialized();
    put_u8(os, has_adam ? 1 : 0);
    if (has_adam) {
        std::uint64_t step = static_cast<std::uint64_t>(adam.step);
        os.write(reinterpret_cast<const char*>(&step), sizeof(step));
        for (const auto& v : adam.m) put_doubles(os, v);
        for (const auto& v : adam.v) put_doubles(os, v);
    }
    if (!os) throw IoError("write failure: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCkptMagic, 4) != 0) throw IoError("not an EPNS checkpoint: " + path.string());
    const std::uint32_t version = get_u32(is);
    if (version != 1)
        throw IoError("checkpoint version " + std::to_string(version) + " unsupported; retrain with this build");
    Checkpoint c;
    c.config_json = get_string(is);
    c.epoch = static_cast<int>(get_u32(is));
    is.read(reinterpret_cast<char*>(&c.best_val_elbo), sizeof(double));
    const std::uint32_t n_blocks = get_u32(is);
    for (std::uint32_t i = 0; i < n_blocks; ++i) {
        const std::string name = get_string(is);
        const std::uint32_t rank = get_u32(is);
        Shape dims;
        for (std::uint32_t d = 0; d < rank; ++d) dims.push_back(static_cast<int>(get_u32(is)));
        std::vector<double> data = get_doubles(is);
        c.blocks.emplace_back(name, Tensor::from(dims, std::move(data)));
    }
    if (get_u8(is)) {
        std::uint64_t step = 0;
        is.read(reinterpret_cast<char*>(&step), sizeof(step));
        c.adam.step = static_cast<std::int64_t>(step);
        c.adam.m.resize(n_blocks);
        c.adam.v.resize(n_blocks);
        for (auto& v : c.adam.m) v = get_doubles(is);
        for (auto& v : c.adam.v) v = get_doubles(is);
    }
    if (!is) throw IoError("truncated checkpoint: " + path.string());
    return c;
}

void restore_params(const Checkpoint& ckpt, ParamStore& params) {
    if (ckpt.blocks.size() != params.size())
        throw IoError("checkpoint has " + std::to_string(ckpt.blocks.size()) + " blocks, model expects " +
                      std::to_string(params.size()) + " (config mismatch)");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (ckpt.blocks[i].first != params.name(i) || ckpt.blocks[i].second.dims() != params.tensor(i).dims())
            throw IoError("checkpoint block " + ckpt.blocks[i].first + " does not match model block " + params.name(i));
        params.tensor(i).data() = ckpt.blocks[i].second.data();
    }
}

// ---------------------------------------------------------------------------
// CSV / SVG
// ---------------------------------------------------------------------------

void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
    os << "\n";
    os.precision(12);
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
        os << "\n";
    }
    if (!os) throw IoError("write failure: " + path.string());
}

void write_svg_plot(const fs::path& path, const std::string& title, const std::vector<SvgSeries>& series,
                    const std::vector<double>& band_lo, const std::vector<double>& band_hi) {
    const int width = 640, height = 400, margin = 50;
    double ymin = 1e300, ymax = -1e300;
    std::size_t n = 0;
    auto scan = [&](const std::vector<double>& ys) {
        n = std::max(n, ys.size());
        for (double y : ys)
            if (std::isfinite(y)) {
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
    };
    for (const auto& s : series) scan(s.y);
    scan(band_lo);
    scan(band_hi);
    if (n < 2 || ymin > ymax) {
        ymin = 0;
        ymax = 1;
        n = std::max<std::size_t>(n, 2);
    }
    if (ymax - ymin < 1e-12) {
        ymax += 0.5;
        ymin -= 0.5;
    }
    auto sx = [&](std::size_t i) {
        return margin + static_cast<double>(i) / static_cast<double>(n - 1) * (width - 2 * margin);
    };
    auto sy = [&](double y) { return height - margin - (y - ymin) / (ymax - ymin) * (height - 2 * margin); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin << "\" y2=\""
       << height - margin << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\"" << height - margin
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << margin - 6 << "\" y=\"" << sy(ymin) << "\" text-anchor=\"end\" font-size=\"10\">" << ymin
       << "</text>\n";
    os << "<text x=\"" << margin - 6 << "\" y=\"" << sy(ymax) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << ymax
       << "</text>\n";

    if (!band_lo.empty() && band_lo.size() == band_hi.size()) {
        os << "<path d=\"M";
        for (std::size_t i = 0; i < band_lo.size(); ++i) os << sx(i) << " " << sy(band_lo[i]) << " L";
        for (std::size_t i = band_hi.size(); i-- > 0;) os << sx(i) << " " << sy(band_hi[i]) << (i ? " L" : " Z");
        os << "\" fill=\"#a6cee3\" fill-opacity=\"0.45\" stroke=\"none\"/>\n";
    }
    int label_y = 36;
    for (const auto& s : series) {
        os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.y.size(); ++i) os << sx(i) << "," << sy(s.y[i]) << " ";
        os << "\"/>\n";
        if (!s.label.empty()) {
            os << "<text x=\"" << width - margin - 4 << "\" y=\"" << label_y << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
               << s.color << "\">" << s.label << "</text>\n";
            label_y += 14;
        }
    }
    os << "</svg>\n";

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << os.str();
    if (!f) throw IoError("write failure: " + path.string());
}

} // namespace epns
