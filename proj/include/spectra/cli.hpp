#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "spectra/model.hpp"
#include "spectra/training.hpp"

namespace spectra::cli {

/// Flat `key=value` run configuration. Blank lines and `#` comments are
/// ignored; unknown keys and malformed values are ConfigErrors. `seed` seeds
/// the weight initialization, `train_seed` the shuffling and dropout.
std::pair<SpectraConfig, TrainConfig> parse_config_text(const std::string& text);
std::pair<SpectraConfig, TrainConfig> read_config_file(const std::string& path);
std::string config_text(const SpectraConfig& config, const TrainConfig& train);

/// Exit codes: 0 success, 1 usage/config, 2 data or file format, 3 numeric.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace spectra::cli
