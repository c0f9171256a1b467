#pragma once

// Experiment files are INI text with one section per module:
//
//   [experiment] mode seed epochs batch_size eval_every init_checkpoint
//   [data]       source path num_classes train_size test_size difficulty
//                data_seed augment flip pad crop
//   [network]    depth widen dropout bn_eps bn_momentum
//   [teacher]    logits checkpoint on_the_fly_dropout
//   [kd]         temperature
//   [gan]        use_supervised use_l1 use_adversarial discriminator_depth
//                discriminator_dropout discriminator_steps adversarial_form
//   [optim] and [discriminator_optim]
//                lr0 momentum weight_decay milestones decay_factor
//
// Missing keys take defaults; unknown keys are errors. When milestones are
// omitted they are the 80/160-of-200 schedule rescaled to `epochs`.

#include <string>
#include <vector>

#include "kdgan/engine.hpp"

namespace kdgan {

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// "section.key=value" overrides applied on top of `text`.
ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides);

// Every field, including defaults, in parseable form.
std::string render_config(const ExperimentConfig& cfg);

}  // namespace kdgan
