// Command-line front end for the experiment harness.
//
//   gne_cli run --config cfg.json --out results/ [--jobs 4] [--seed-offset 0]
//   gne_cli gen-instance --seed 3 --out instance.json [--config cfg.json]
//   gne_cli reference --config cfg.json --out refs/
//   gne_cli validate --config cfg.json
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error,
// 3 every run cell failed. GNE_LOG_LEVEL selects the log level.

#include <gne/experiment.hpp>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <string>

namespace {

gne::ExperimentSpec load_spec(const std::string& path) {
  return path.empty() ? gne::parse_config(gne::json::object()) : gne::validate_config(path);
}

int cmd_run(const std::string& config, const std::string& out, int jobs, std::uint64_t seed_offset) {
  gne::ExperimentSpec spec = load_spec(config);
  for (std::uint64_t& s : spec.seeds) s += seed_offset;
  spdlog::info("running {} seeds x {} batch sizes x {} modes into {}", spec.seeds.size(), spec.S_values.size(),
               spec.modes.size(), out);
  gne::ExperimentOptions opt;
  opt.jobs = jobs;
  opt.log = [](const std::string& m) { spdlog::info("{}", m); };
  const gne::ExperimentReport rep = gne::run_experiment(spec, out, opt);
  size_t ok = 0;
  for (const gne::CellResult& c : rep.cells) ok += c.ok ? 1 : 0;
  if (rep.exit_code == 0) {
    spdlog::info("{}/{} cells completed", ok, rep.cells.size());
  } else {
    spdlog::error("all {} cells failed", rep.cells.size());
  }
  return rep.exit_code;
}

int cmd_gen_instance(const std::string& config, std::uint64_t seed, const std::string& out) {
  const gne::ExperimentSpec spec = load_spec(config);
  const gne::EvSample inst = gne::make_instance(spec, seed);
  gne::write_atomic(out, gne::instance_to_json(inst.game, inst.noise).dump(2) + "\n");
  spdlog::info("wrote instance N={} T={} to {}", inst.game.num_agents(), inst.game.horizon(), out);
  return 0;
}

int cmd_reference(const std::string& config, const std::string& out) {
  const gne::ExperimentSpec spec = load_spec(config);
  std::filesystem::create_directories(out);
  gne::json refs = gne::json::array();
  bool all_ok = true;
  for (std::uint64_t seed : spec.seeds) {
    const gne::EvSample inst = gne::make_instance(spec, seed);
    const gne::ReferenceGNE ref = gne::compute_reference_gne(inst.game, gne::reference_options(spec, seed));
    all_ok = all_ok && ref.converged;
    if (ref.converged) {
      spdlog::info("reference via {} for seed {}: fp_residual {:.3g}", ref.route, seed, ref.fp_residual);
    } else {
      spdlog::warn("no certified reference for seed {}: fp_residual {:.3g}", seed, ref.fp_residual);
    }
    gne::json x = gne::json::array();
    for (gne::Index k = 0; k < ref.x_star.size(); ++k) x.push_back(ref.x_star(k));
    refs.push_back({{"seed", seed},
                    {"route", ref.route},
                    {"fp_residual", ref.fp_residual},
                    {"converged", ref.converged},
                    {"x_star", x}});
  }
  gne::write_atomic(std::filesystem::path(out) / "references.json", refs.dump(2) + "\n");
  return all_ok ? 0 : 3;
}

void set_log_level() {
  if (const char* lvl = std::getenv("GNE_LOG_LEVEL")) {
    spdlog::set_level(spdlog::level::from_str(lvl));
  }
}

}  // namespace

int main(int argc, char** argv) {
  set_log_level();
  CLI::App app{"Active learning of generalized Nash equilibria from noisy best responses"};
  app.require_subcommand(1);

  std::string config, out;
  int jobs = 1;
  std::uint64_t seed_offset = 0, seed = 0;

  auto* run = app.add_subcommand("run", "run a seed/batch-size/mode sweep");
  run->add_option("--config", config, "JSON configuration (defaults when omitted)")->check(CLI::ExistingFile);
  run->add_option("--out", out, "output directory")->required();
  run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  run->add_option("--seed-offset", seed_offset, "added to every configured seed");

  auto* gen = app.add_subcommand("gen-instance", "sample one EV instance and write it as JSON");
  gen->add_option("--config", config, "JSON configuration for instance overrides")->check(CLI::ExistingFile);
  gen->add_option("--seed", seed, "instance seed");
  gen->add_option("--out", out, "output file")->required();

  auto* ref = app.add_subcommand("reference", "compute certified reference equilibria");
  ref->add_option("--config", config, "JSON configuration")->check(CLI::ExistingFile);
  ref->add_option("--out", out, "output directory")->required();

  auto* val = app.add_subcommand("validate", "check a configuration and print the resolved form");
  val->add_option("--config", config, "JSON configuration")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config, out, jobs, seed_offset);
    if (*gen) return cmd_gen_instance(config, seed, out);
    if (*ref) return cmd_reference(config, out);
    if (*val) {
      fmt::print("{}\n", gne::to_json(gne::validate_config(config)).dump(2));
      return 0;
    }
  } catch (const gne::ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 1;
}
