// gmat grow|continual|eval|gen-data --config <path> [--out <dir>] [--seed <u64>]
//
// Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gmat/experiment.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4 };

int run(const std::string& command, const std::string& config_path, const std::optional<std::string>& out,
        const std::optional<std::uint64_t>& seed) {
    try {
        const auto cfg = gmat::load_config(config_path, seed);
        const std::filesystem::path dir = out ? *out : cfg.output_dir;
        if (command == "grow") gmat::cmd_grow(cfg, dir);
        else if (command == "continual") gmat::cmd_continual(cfg, dir);
        else if (command == "eval") gmat::cmd_eval(cfg, dir);
        else gmat::cmd_gen_data(cfg, dir);
        return kOk;
    } catch (const gmat::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const gmat::ContractError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const gmat::NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const gmat::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const gmat::FormatError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype mixture models with growth by splitting"};
    app.require_subcommand(1);
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::string chosen;
    for (const char* name : {"grow", "continual", "eval", "gen-data"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config, "experiment config file")->required();
        sub->add_option("--out", out, "output directory (default: output_dir from the config)");
        sub->add_option("--seed", seed, "override the config seed");
        sub->callback([&chosen, name] { chosen = name; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfig;
    }
    return run(chosen, config, out, seed);
}
