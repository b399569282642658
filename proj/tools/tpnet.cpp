// tpnet command-line tool: train, score, eval, attention, baseline, synth.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tpnet/tpnet.hpp"

namespace fs = std::filesystem;
using namespace tpnet;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string checkpoint;
    std::string manifest;
    std::vector<std::string> inputs;
    std::vector<std::string> kinds{"gaussian_blur", "additive_noise", "bicubic_updown"};
    std::vector<double> severities{0.0, 0.5, 1.0, 2.0};
    std::size_t procedural = 0;
    std::size_t size = 256;
    bool verbose = false;
};

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::io, "cannot create directory " + dir + ": " + ec.message());
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + path);
    return out;
}

// Writes to `path`, or stdout when it is empty.
void emit(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    if (const auto parent = fs::path(path).parent_path(); !parent.empty()) ensure_dir(parent.string());
    write_file(path, text);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::vector<fs::path> png_files(const std::string& dir) {
    if (!fs::is_directory(dir)) fail(ErrorKind::data, "not a directory: " + dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return files;
}

// Manifest-relative id, the same spelling the manifest CSV uses.
std::string record_id(const SampleRecord& r, const std::string& manifest_path) {
    const auto rel = fs::path(r.image_path).lexically_relative(fs::path(manifest_path).parent_path());
    return rel.empty() ? r.image_path : rel.generic_string();
}

std::vector<Example> load_examples(const std::vector<SampleRecord>& records, const std::string& manifest_path) {
    std::vector<Example> out;
    for (const auto& r : records) out.push_back({record_id(r, manifest_path), read_png(r.image_path), r.mos_normalized});
    return out;
}

std::string scores_csv(const std::vector<std::string>& ids, const std::vector<double>& scores) {
    std::string out = "id,predicted\n";
    for (std::size_t i = 0; i < ids.size(); ++i) out += csv_escape(ids[i]) + "," + fmt(scores[i]) + "\n";
    return out;
}

// ---------------------------------------------------------------------------

int cmd_train(const Options& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
    if (o.seed) cfg.seed = cfg.train.seed = *o.seed;
    if (!o.out.empty()) cfg.output_dir = o.out;
    if (!o.manifest.empty()) cfg.data.manifest = o.manifest;
    if (cfg.data.manifest.empty()) fail(ErrorKind::config, "train: no manifest (set data.manifest or --manifest)");
    cfg.model.validate();
    cfg.train.validate();
    const json resolved = to_json(cfg);
    const std::string hash = config_hash(resolved);

    auto manifest = split_manifest(load_manifest(cfg.data.manifest), cfg.seed, cfg.data.group_aware_split);
    const auto train = load_examples(manifest.subset(Split::train), cfg.data.manifest);
    const auto val = load_examples(manifest.subset(Split::val), cfg.data.manifest);
    const auto test = load_examples(manifest.subset(Split::test), cfg.data.manifest);

    ensure_dir(cfg.output_dir);
    emit(cfg.output_dir + "/config.json",
         json{{"config", resolved}, {"config_hash", hash}, {"split_seed", derive_seed(cfg.seed, "split")}}.dump(2) +
             "\n");

    BackboneConfig bcfg;
    bcfg.frozen = cfg.train.freeze_backbone;
    Network<float> net;
    TrainState<float> state;
    if (!o.checkpoint.empty()) {
        auto ck = load_checkpoint<float>(o.checkpoint, cfg.model);
        if (ck.header.value("config_hash", "") != hash)
            std::clog << "warning: " << o.checkpoint << " was written under a different config\n";
        net = std::move(ck.net);
        state = std::move(ck.state);
        std::clog << "resuming at epoch " << state.epoch << "\n";
    } else {
        net = Network<float>::create(cfg.model, bcfg, cfg.seed);
        if (!cfg.backbone.pretrained.empty()) net.trunk = import_pretrained<float>(cfg.backbone.pretrained, bcfg);
        else std::clog << "warning: no pretrained backbone configured; using a seeded random trunk\n";
        state = TrainState<float>::create(net, cfg.seed, cfg.train.freeze_backbone);
    }

    auto result = fit(net, state, train, val, cfg.train, FitOptions{cfg.output_dir, hash, true});
    emit(cfg.output_dir + "/history.csv", history_csv(result.history));

    if (!test.empty()) {
        net.head = result.best_head;
        net.trunk = result.best_trunk;
        const auto scores = score_examples(net, test);
        std::vector<std::string> ids;
        std::vector<metrics::ScoredPair> pairs;
        for (std::size_t i = 0; i < test.size(); ++i) {
            ids.push_back(test[i].id);
            pairs.push_back({scores[i], test[i].target, test[i].id});
        }
        emit(cfg.output_dir + "/test_scores.csv", scores_csv(ids, scores));
        json report;
        try {
            report = metrics::evaluate(pairs);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::numeric) throw;
            report = json{{"n", pairs.size()}, {"error", e.what()}};
            std::clog << "warning: test metrics undefined: " << e.what() << "\n";
        }
        emit(cfg.output_dir + "/test_metrics.json", report.dump(2) + "\n");
        std::clog << "test " << report.dump() << "\n";
    }
    std::clog << "best epoch " << result.best_epoch << " val_plcc " << result.best_val_plcc << "\n";
    return 0;
}

int cmd_score(const Options& o) {
    if (o.checkpoint.empty()) fail(ErrorKind::config, "score: --checkpoint is required");
    if (o.manifest.empty() == o.inputs.empty())
        fail(ErrorKind::config, "score: give either --manifest or image paths");
    const auto ck = load_checkpoint<float>(o.checkpoint);
    std::vector<std::string> ids;
    std::vector<std::string> paths;
    if (!o.manifest.empty()) {
        for (const auto& r : load_manifest(o.manifest).records) {
            ids.push_back(record_id(r, o.manifest));
            paths.push_back(r.image_path);
        }
    } else {
        ids = paths = o.inputs;
    }
    std::vector<double> scores;
    for (const auto& p : paths) {
        const Image img = read_png(p);
        const std::size_t min_side = ck.net.model.min_input_side();
        if (img.width < min_side || img.height < min_side)
            fail(ErrorKind::shape, p + ": " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                       " is below the minimum input size " + std::to_string(min_side) + "x" +
                                       std::to_string(min_side));
        scores.push_back(ck.net.score(eval_tensor(img, ck.net))[0]);
    }
    emit(o.out, scores_csv(ids, scores));
    return 0;
}

int cmd_eval(const Options& o) {
    if (o.inputs.size() != 1 || o.manifest.empty())
        fail(ErrorKind::config, "eval: expected one scored CSV and --manifest");
    const auto table = read_csv(o.inputs[0]);
    const auto id_col = table.column("id"), pred_col = table.column("predicted");
    if (!id_col || !pred_col) fail(ErrorKind::data, o.inputs[0] + ": needs id and predicted columns");
    const auto manifest = load_manifest(o.manifest, false);
    std::map<std::string, double> mos;
    for (const auto& r : manifest.records) mos[record_id(r, o.manifest)] = r.mos;

    std::vector<metrics::ScoredPair> pairs;
    std::vector<std::string> unmatched;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        const std::string where = o.inputs[0] + " row " + std::to_string(i + 1);
        if (row.size() < table.header.size()) fail(ErrorKind::data, where + ": missing fields");
        const auto it = mos.find(row[*id_col]);
        if (it == mos.end()) {
            unmatched.push_back(row[*id_col]);
            continue;
        }
        pairs.push_back({parse_double(row[*pred_col], where), it->second, row[*id_col]});
    }
    if (!unmatched.empty()) {
        std::string list;
        for (const auto& u : unmatched) list += (list.empty() ? "" : ", ") + u;
        fail(ErrorKind::data, "ids not in manifest: " + list);
    }
    const json report = metrics::evaluate(pairs);
    emit(o.out, report.dump(2) + "\n");
    return 0;
}

int cmd_attention(const Options& o) {
    if (o.checkpoint.empty() || o.inputs.size() != 1 || o.out.empty())
        fail(ErrorKind::config, "attention: expected --checkpoint, one image and --out");
    const auto ck = load_checkpoint<float>(o.checkpoint);
    const auto x = eval_tensor(read_png(o.inputs[0]), ck.net);
    const auto maps = extract_attention(x, ck.net.head, ck.net.model, ck.net.trunk, ck.net.backbone);
    ensure_dir(o.out);
    json summary = json::array();
    for (const auto& s : maps.stages) {
        Image img(s.map.w(), s.map.h(), 1);
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            img.pixels[i] = to_u8(255.0 * static_cast<double>(s.map.data()[i]));
        const std::string name = "stage" + std::to_string(s.stage) + ".png";
        write_png(o.out + "/" + name, img);
        summary.push_back({{"stage", s.stage},
                           {"file", name},
                           {"width", img.width},
                           {"height", img.height},
                           {"raw_min", s.raw_min},
                           {"raw_max", s.raw_max}});
    }
    emit(o.out + "/attention.json", summary.dump(2) + "\n");
    return 0;
}

int cmd_baseline(const Options& o) {
    if (o.inputs.size() != 2) fail(ErrorKind::config, "baseline: expected a reference and a test directory");
    const auto refs = png_files(o.inputs[0]);
    std::map<std::string, fs::path> tests;
    for (const auto& p : png_files(o.inputs[1])) tests[p.filename().string()] = p;
    std::vector<std::string> unpaired;
    for (const auto& r : refs)
        if (!tests.count(r.filename().string())) unpaired.push_back(o.inputs[0] + "/" + r.filename().string());
    for (const auto& [name, p] : tests)
        if (std::none_of(refs.begin(), refs.end(), [&](const fs::path& r) { return r.filename() == name; }))
            unpaired.push_back(p.string());
    if (!unpaired.empty()) {
        std::string list;
        for (const auto& u : unpaired) list += (list.empty() ? "" : ", ") + u;
        fail(ErrorKind::data, "unpaired files: " + list);
    }

    std::string csv = "name,psnr_db,ssim,error\n";
    double psnr_sum = 0, ssim_sum = 0;
    std::size_t ok = 0, finite = 0, failed = 0;
    for (const auto& r : refs) {
        const std::string name = r.filename().string();
        try {
            const Image a = read_png(r.string()), b = read_png(tests.at(name).string());
            const auto p = metrics::psnr(a, b);
            const double s = metrics::ssim(a, b);
            csv += csv_escape(name) + "," + p.str() + "," + fmt(s) + ",\n";
            if (!p.infinite) {
                psnr_sum += p.db;
                ++finite;
            }
            ssim_sum += s;
            ++ok;
        } catch (const Error& e) {
            csv += csv_escape(name) + ",,," + csv_escape(e.what()) + "\n";
            std::clog << name << ": " << e.what() << "\n";
            ++failed;
        }
    }
    csv += "mean," + (finite ? fmt(psnr_sum / static_cast<double>(finite)) : std::string(ok ? "inf" : "")) + "," +
           (ok ? fmt(ssim_sum / static_cast<double>(ok)) : std::string()) + ",\n";
    emit(o.out, csv);
    if (failed) fail(ErrorKind::shape, std::to_string(failed) + " of " + std::to_string(refs.size()) + " pairs failed");
    return 0;
}

int cmd_synth(const Options& o) {
    if (o.out.empty()) fail(ErrorKind::config, "synth: --out is required");
    if (o.inputs.size() > 1 || o.inputs.empty() == (o.procedural == 0))
        fail(ErrorKind::config, "synth: give one source directory or --procedural N");
    std::vector<DegradationKind> kinds;
    for (const auto& k : o.kinds) kinds.push_back(parse_degradation(k));
    for (double s : o.severities)
        if (!(s >= 0) || !std::isfinite(s)) fail(ErrorKind::config, "synth: severities must be finite and >= 0");
    const std::uint64_t seed = o.seed.value_or(0);
    ensure_dir(o.out);

    std::vector<std::pair<std::string, Image>> sources;
    if (o.procedural) {
        ensure_dir(o.out + "/sources");
        for (std::size_t i = 0; i < o.procedural; ++i) {
            const std::string stem = "src" + std::to_string(i);
            sources.emplace_back(stem, procedural_source(o.size, o.size, derive_seed(seed, "source", i)));
            write_png(o.out + "/sources/" + stem + ".png", sources.back().second);
        }
    } else {
        for (const auto& p : png_files(o.inputs[0])) sources.emplace_back(p.stem().string(), read_png(p.string()));
        if (sources.empty()) fail(ErrorKind::data, "synth: no PNG files in " + o.inputs[0]);
    }

    Manifest m;
    json entries = json::array();
    std::uint64_t index = 0;
    for (const auto& [stem, src] : sources)
        for (auto kind : kinds)
            for (double sev : o.severities) {
                DegradationSpec spec{kind, sev, derive_seed(seed, "synth", index++)};
                const auto d = synthesize(src, spec);
                std::ostringstream name;
                name << stem << "_" << to_string(kind) << "_" << std::setprecision(6) << sev << ".png";
                write_png(o.out + "/" + name.str(), d.image);
                SampleRecord r;
                r.image_path = o.out + "/" + name.str();
                r.mos = d.pseudo_mos;
                r.group_id = stem;
                r.method_tag = to_string(kind);
                m.records.push_back(r);
                entries.push_back(
                    {{"file", name.str()}, {"kind", to_string(kind)}, {"severity", sev}, {"seed", spec.seed}});
            }
    write_manifest(m, o.out + "/manifest.csv");
    const json sidecar{{"seed", seed},
                       {"kinds", o.kinds},
                       {"severities", o.severities},
                       {"procedural", o.procedural},
                       {"size", o.size},
                       {"entries", entries}};
    emit(o.out + "/seeds.json",
         json{{"synth", sidecar}, {"config_hash", config_hash(sidecar)}}.dump(2) + "\n");
    std::clog << "wrote " << m.records.size() << " images to " << o.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TPNet: no-reference quality assessment for super-resolved images"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON run configuration");
        sub->add_option("--seed", o.seed, "root seed (overrides the config)");
        sub->add_option("--out", o.out, "output file or directory");
        sub->add_option("--checkpoint", o.checkpoint, "checkpoint file");
        sub->add_option("--manifest", o.manifest, "manifest CSV (image_path,mos[,group_id,method,scale])");
    };
    auto* train = app.add_subcommand("train", "train on a manifest; writes checkpoints, history and test metrics");
    auto* score = app.add_subcommand("score", "score images or a manifest with a checkpoint");
    auto* eval = app.add_subcommand("eval", "PLCC/SRCC of a scored CSV against manifest MOS");
    auto* attention = app.add_subcommand("attention", "export per-stage spatial attention maps as PNG");
    auto* baseline = app.add_subcommand("baseline", "PSNR/SSIM between paired reference and test directories");
    auto* synth = app.add_subcommand("synth", "generate a synthetic degradation ladder with a manifest");
    for (auto* sub : {train, score, eval, attention, baseline, synth}) common(sub);
    score->add_option("images", o.inputs, "PNG images to score");
    eval->add_option("scores", o.inputs, "CSV with id,predicted");
    attention->add_option("image", o.inputs, "PNG image");
    baseline->add_option("dirs", o.inputs, "reference directory, test directory");
    synth->add_option("source", o.inputs, "directory of source PNG images");
    synth->add_option("--kinds", o.kinds, "gaussian_blur, additive_noise, bicubic_updown")->delimiter(',');
    synth->add_option("--severities", o.severities, "severity grid")->delimiter(',');
    synth->add_option("--procedural", o.procedural, "generate N seeded source images instead of reading a directory");
    synth->add_option("--size", o.size, "side of procedural sources")->check(CLI::Range(1, 1 << 14));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_code(ErrorKind::config);
    }

    try {
        if (*train) return cmd_train(o);
        if (*score) return cmd_score(o);
        if (*eval) return cmd_eval(o);
        if (*attention) return cmd_attention(o);
        if (*baseline) return cmd_baseline(o);
        if (*synth) return cmd_synth(o);
    } catch (const Error& e) {
        std::cerr << "tpnet: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "tpnet: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
