#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace varlap::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kNumericalFailure = 3 };

/// Entry point of the `varlap` executable. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cmd_fit(const std::string& config_path, const std::string& data_path,
            const std::vector<std::string>& overrides, std::ostream& out, std::ostream& err);
int cmd_simulate(const std::string& config_path, const std::vector<std::string>& overrides,
                 std::ostream& out, std::ostream& err);
int cmd_diagnose(const std::string& name, const std::string& out_path, std::ostream& out,
                 std::ostream& err);
int cmd_selftest(std::ostream& out, std::ostream& err);

}  // namespace varlap::cli
