#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mim/config.h"
#include "mim/data.h"
#include "mim/error.h"
#include "mim/eval.h"
#include "mim/pipeline.h"
#include "mim/teacher.h"
#include "mim/tensor_io.h"
#include "mim/vit.h"

namespace fs = std::filesystem;
using namespace mim;

namespace {

std::string key_reference() {
    std::string out = "Configuration keys (via --set key=value or a --config file):\n";
    for (const ConfigKey& k : config_keys()) {
        out += "  " + k.name;
        if (!k.fallback.empty()) out += " (default " + k.fallback + ")";
        out += "\n      " + k.help + "\n";
    }
    return out;
}

TrainConfig make_config(const std::string& config_path, const std::vector<std::string>& sets) {
    KeyValues kv;
    if (!config_path.empty()) kv = load_config_file(config_path);
    for (const std::string& assignment : sets) apply_override(kv, assignment);
    return resolve_config(kv);
}

Checkpoint load_for_eval(const TrainConfig& cfg, const std::string& requested) {
    const std::string path =
        requested.empty() ? cfg.out_dir + "/checkpoint-final.mimt" : requested;
    return load_checkpoint(path);
}

int run_pretrain(const TrainConfig& cfg, const std::string& resume) {
    const PretrainResult r = run_pretraining(cfg, resume);
    std::printf("pre-trained %zu steps, final loss %.9g\n", r.steps_done, r.final_loss);
    std::printf("checkpoint %s\n", r.checkpoint_path.c_str());
    std::printf("metrics %s\n", r.metrics_path.c_str());
    return 0;
}

int run_probe(const TrainConfig& cfg, const std::string& checkpoint, bool dense) {
    const Checkpoint ck = load_for_eval(cfg, checkpoint);
    const Corpus corpus = load_dataset(cfg);
    const ProbeResult r =
        dense ? dense_probe(ck.params, corpus, cfg) : linear_probe(ck.params, corpus, cfg);
    if (dense)
        std::printf("dense probe mean IoU %.9g over %zu held-out patches\n", r.metric,
                    r.samples);
    else
        std::printf("linear probe accuracy %.9g over %zu held-out images\n", r.metric,
                    r.samples);
    return 0;
}

int run_finetune(const TrainConfig& cfg, const std::string& checkpoint) {
    const Checkpoint ck = load_for_eval(cfg, checkpoint);
    const Corpus corpus = load_dataset(cfg);
    const ProbeResult r = finetune(ck.params, corpus, cfg);
    std::printf("fine-tune accuracy %.9g over %zu held-out images\n", r.metric, r.samples);
    return 0;
}

int run_attnmap(const TrainConfig& cfg, const std::string& checkpoint) {
    const Checkpoint ck = load_for_eval(cfg, checkpoint);
    const Corpus corpus = load_dataset(cfg);
    if (cfg.attn_image >= corpus.size())
        throw UserError("attnmap.image " + std::to_string(cfg.attn_image) +
                        " is out of range for a corpus of " + std::to_string(corpus.size()) +
                        " images");
    const Tensor map = attention_map(ck.params, corpus.images[cfg.attn_image], cfg);
    fs::create_directories(cfg.out_dir);
    const std::string stem = cfg.out_dir + "/attention-" + std::to_string(cfg.attn_image);
    const auto paths = write_attention_map(map, stem);
    std::printf("wrote %s and %s\n", paths.first.c_str(), paths.second.c_str());
    return 0;
}

int run_synth_data(const TrainConfig& cfg) {
    const Corpus corpus = synth_dataset(cfg.data.seed, cfg.data.count, cfg.data.classes,
                                        cfg.model.image_size, cfg.model.channels);
    std::string dest = cfg.data.path;
    if (dest.empty()) {
        fs::create_directories(cfg.out_dir);
        dest = cfg.out_dir + "/corpus.mimc";
    }
    save_corpus(corpus, dest);
    std::printf("wrote %zu images to %s\n", corpus.size(), dest.c_str());
    if (corpus.has_seg()) {
        Corpus seg;
        seg.images = corpus.seg;
        seg.labels.assign(corpus.size(), kNoLabel);
        save_corpus(seg, dest + ".seg");
        std::printf("segmentation sidecar %s\n", (dest + ".seg").c_str());
    }
    return 0;
}

int run_ablate(const TrainConfig& cfg) {
    const AblationResult r = run_ablation(cfg);
    for (const AblationRow& row : r.rows)
        std::printf("%s seed %llu: probe %.4f, dense IoU %.4f\n", guidance_name(row.guidance),
                    static_cast<unsigned long long>(row.seed), row.probe_acc, row.dense_iou);
    for (const AblationGroup& g : r.groups)
        std::printf("%s: probe %.4f +- %.4f, dense IoU %.4f +- %.4f\n",
                    guidance_name(g.guidance), g.probe_mean, g.probe_std, g.iou_mean, g.iou_std);
    if (r.groups.size() >= 2) {
        std::vector<AblationGroup> order = r.groups;
        std::sort(order.begin(), order.end(),
                  [](const AblationGroup& a, const AblationGroup& b) {
                      return a.probe_mean > b.probe_mean;
                  });
        std::string line = "probe ordering: ";
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (i) line += " > ";
            line += guidance_name(order[i].guidance);
            char buf[32];
            std::snprintf(buf, sizeof(buf), " (%.4f)", order[i].probe_mean);
            line += buf;
        }
        std::printf("%s\n", line.c_str());
    }
    std::printf("table %s\n", r.csv_path.c_str());
    std::printf("summary %s\n", r.summary_path.c_str());
    return 0;
}

int run_teacher_train(const TrainConfig& cfg) {
    const Corpus corpus = load_dataset(cfg);
    const ViTConfig tc = vit_preset(cfg.teacher.preset);
    const ToyTeacherResult r =
        train_toy_teacher(corpus, tc, cfg.teacher.steps, cfg.teacher.seed);
    std::string dest = cfg.teacher.weights;
    if (dest.empty()) {
        fs::create_directories(cfg.out_dir);
        dest = cfg.out_dir + "/toy-teacher.mimt";
    }
    tensor_save(r.teacher.params(), dest);
    std::printf("toy teacher held-out accuracy %.9g over %zu images\n", r.accuracy,
                r.eval_count);
    std::printf("weights %s\n", dest.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked-image pre-training against a frozen feature teacher"};
    app.require_subcommand(1);
    app.footer(key_reference());

    std::string config_path;
    std::vector<std::string> sets;
    std::string resume;
    std::string checkpoint;

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Flat `key = value` configuration file");
        sub->add_option("--set", sets, "Override one configuration key (repeatable)");
    };
    const auto add_checkpoint = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", checkpoint,
                        "Checkpoint to evaluate (default <out.dir>/checkpoint-final.mimt)");
    };

    CLI::App* pretrain = app.add_subcommand("pretrain", "Run masked pre-training");
    add_common(pretrain);
    pretrain->add_option("--resume", resume, "Continue from an earlier checkpoint");

    CLI::App* probe = app.add_subcommand("probe", "Linear-probe a frozen backbone");
    add_common(probe);
    add_checkpoint(probe);

    CLI::App* dense = app.add_subcommand("dense-probe", "Per-patch probe scored as mean IoU");
    add_common(dense);
    add_checkpoint(dense);

    CLI::App* fine = app.add_subcommand("finetune", "Fine-tune end to end for classification");
    add_common(fine);
    add_checkpoint(fine);

    CLI::App* attn = app.add_subcommand("attnmap", "Dump a CLS attention map");
    add_common(attn);
    add_checkpoint(attn);

    CLI::App* synth = app.add_subcommand("synth-data", "Write a synthetic corpus");
    add_common(synth);

    CLI::App* ablate = app.add_subcommand("ablate", "Compare guidance kinds across seeds");
    add_common(ablate);

    CLI::App* teacher = app.add_subcommand("teacher-train", "Train and save the toy teacher");
    add_common(teacher);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::fprintf(stderr, "error: %s\n\n%s", e.what(), app.help().c_str());
        return 1;
    }

    try {
        const TrainConfig cfg = make_config(config_path, sets);
        if (pretrain->parsed()) return run_pretrain(cfg, resume);
        if (probe->parsed()) return run_probe(cfg, checkpoint, false);
        if (dense->parsed()) return run_probe(cfg, checkpoint, true);
        if (fine->parsed()) return run_finetune(cfg, checkpoint);
        if (attn->parsed()) return run_attnmap(cfg, checkpoint);
        if (synth->parsed()) return run_synth_data(cfg);
        if (ablate->parsed()) return run_ablate(cfg);
        if (teacher->parsed()) return run_teacher_train(cfg);
    } catch (const UserError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 2;
    }
    return 0;
}
