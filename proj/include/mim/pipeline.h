#pragma once

#include <cstdint>
#include <string>

#include "mim/config.h"
#include "mim/data.h"
#include "mim/optim.h"
#include "mim/teacher.h"
#include "mim/tensor.h"

namespace mim {

// Corpus named by the config: the synthetic shape generator when data.path
// is empty, otherwise a corpus file or image directory. A one-channel corpus
// at `<path>.seg` is picked up as segmentation masks. Applies the configured
// per-channel normalization and rejects images whose dimensions do not match
// the model.
Corpus load_dataset(const TrainConfig& config);

// Teacher for the configured guidance kind. A toy-semantic teacher without a
// weights file is trained on the given corpus first.
Teacher make_teacher(const TrainConfig& config, const Corpus& corpus);

// On-disk training state: student backbone + head + mask embedding, the
// optimizer moments, the completed step count, and the config digest, all in
// one tensor container.
struct Checkpoint {
    ParamStore params;
    OptimizerState opt;
    std::size_t step = 0;
    std::string digest;
};

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const OptimizerState& opt, std::size_t step, const std::string& digest);
Checkpoint load_checkpoint(const std::string& path);

struct PretrainResult {
    ParamStore params;
    OptimizerState opt;
    std::size_t steps_done = 0;
    double final_loss = 0.0;
    std::string checkpoint_path;  // final checkpoint on disk
    std::string metrics_path;
};

// The pre-training loop. Per step: sample a batch, one blockwise mask per
// image, teacher features of the unmasked view, student forward over the
// mask-substituted embedding, feature prediction, cosine alignment loss,
// backward, AdamW update on the scheduled rate. Checkpoints land in
// config.out_dir every checkpoint_every steps and at the end; metrics.csv
// gains one `step,loss,lr,ms` row per step. Fully deterministic per seed
// aside from the ms column.
//
// resume_from: path to a checkpoint carrying the same config digest; the
// run continues from its step with bit-identical trajectory to an
// uninterrupted run. Empty starts fresh.
PretrainResult run_pretraining(const TrainConfig& config, const std::string& resume_from = "");

}  // namespace mim
