// afem: data generation, training, evaluation and verification front end.
//
// Exit codes: 0 success, 1 usage, 2 IO/parse, 3 numerical failure.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "afem/errors.hpp"
#include "afem/io.hpp"
#include "afem/nn.hpp"
#include "afem/pipeline.hpp"
#include "afem/verification.hpp"

namespace {

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kNumerical = 3 };

using afem::pipeline::Dataset;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

nlohmann::json base_report(std::string_view command) {
  return {{"command", command}, {"library_version", AFEM_VERSION}};
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  afem::pipeline::GenConfig cfg;
  std::string out;
};

int cmd_generate(const GenerateArgs& a) {
  const auto t0 = Clock::now();
  const Dataset data = afem::pipeline::generate_dataset(a.cfg);
  afem::io::write_dataset(a.out, data);
  fmt::print("wrote {} ({} train, {} test, {}x{} mesh) in {:.2f} s\n", a.out, data.train.size(), data.test.size(),
             a.cfg.nx, a.cfg.ny, seconds_since(t0));
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string ckpt_out;
  std::string report_out;
  std::string resume;
  std::string log;
  std::string arch = "cnn";
  afem::pipeline::TrainConfig cfg;
};

int cmd_train(TrainArgs a) {
  const auto t0 = Clock::now();
  const Dataset data = afem::io::read_dataset(a.data);
  a.cfg.threads = afem::pipeline::threads_from_env();

  afem::nn::ModelConfig model = afem::nn::ModelConfig::default_cnn(data.mesh->ny() + 1, data.mesh->nx() + 1);
  afem::pipeline::TrainState state;
  if (!a.resume.empty()) {
    afem::io::Checkpoint ckpt = afem::io::read_checkpoint(a.resume);
    model = ckpt.model;
    state = std::move(ckpt.state);
  } else {
    if (a.arch == "mlp") model.architecture = afem::nn::Architecture::kMlp;
    state = afem::pipeline::initial_state(model, a.cfg.seed);
  }
  if (model.grid_rows != data.mesh->ny() + 1 || model.grid_cols != data.mesh->nx() + 1) {
    throw afem::CastError(fmt::format("checkpoint model expects a {}x{} grid, dataset mesh gives {}x{}",
                                      model.grid_rows, model.grid_cols, data.mesh->ny() + 1, data.mesh->nx() + 1));
  }

  const nlohmann::json train_echo = a.cfg.to_json();
  auto save = [&](const afem::pipeline::TrainState& s) {
    if (!a.ckpt_out.empty()) afem::io::write_checkpoint(a.ckpt_out, {model, train_echo, s});
  };

  std::optional<std::ofstream> log;
  if (!a.log.empty()) {
    log.emplace(a.log, std::ios::trunc);
    if (!*log) throw afem::IoError(fmt::format("cannot open metrics log '{}'", a.log));
    fmt::print(*log, "# epoch mean_loss wall_seconds\n");
  }
  afem::pipeline::TrainHooks hooks;
  hooks.on_epoch = [&](const afem::pipeline::TrainState& s) {
    const double wall = seconds_since(t0);
    if (log) fmt::print(*log, "{} {:.17g} {:.3f}\n", s.epoch, s.loss_history.back(), wall);
    fmt::print("epoch {:4d}  loss {:.6e}  ({:.1f} s)\n", s.epoch, s.loss_history.back(), wall);
  };
  hooks.checkpoint = save;

  afem::pipeline::TrainState final_state;
  try {
    final_state = afem::pipeline::train(std::move(state), data, model, a.cfg, hooks);
  } catch (const afem::DivergenceError& e) {
    fmt::print(std::cerr, "training diverged: {}\n", e.what());
    if (!a.ckpt_out.empty()) fmt::print(std::cerr, "last good checkpoint retained at {}\n", a.ckpt_out);
    return kNumerical;
  }
  save(final_state);

  const auto ctx = afem::pipeline::make_context(data, model, a.cfg.tol);
  const double r = afem::pipeline::evaluate(ctx, final_state.params, data.test);
  fmt::print("initial loss {:.6e}, final loss {:.6e}, test R = {:.2f}%\n", final_state.loss_history.front(),
             final_state.loss_history.back(), 100.0 * r);

  if (!a.report_out.empty()) {
    nlohmann::json report = base_report("train");
    report["config"] = {{"data", data.config.to_json()}, {"train", train_echo}, {"model", model.to_json()}};
    report["seeds"] = {{"data", data.config.seed}, {"init", final_state.params.seed()}, {"shuffle", a.cfg.seed}};
    report["epochs_completed"] = final_state.epoch;
    report["loss_history"] = final_state.loss_history;
    report["R"] = r;
    report["split"] = "test";
    report["wall_clock_seconds"] = seconds_since(t0);
    afem::io::write_report(a.report_out, report);
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string data;
  std::string ckpt;
  std::string report_out;
  std::string split = "test";
};

int cmd_eval(const EvalArgs& a) {
  const auto t0 = Clock::now();
  const Dataset data = afem::io::read_dataset(a.data);
  const afem::io::Checkpoint ckpt = afem::io::read_checkpoint(a.ckpt);
  if (ckpt.model.grid_rows != data.mesh->ny() + 1 || ckpt.model.grid_cols != data.mesh->nx() + 1) {
    throw afem::CastError(fmt::format("checkpoint model expects a {}x{} grid, dataset mesh gives {}x{}",
                                      ckpt.model.grid_rows, ckpt.model.grid_cols, data.mesh->ny() + 1,
                                      data.mesh->nx() + 1));
  }
  const auto ctx = afem::pipeline::make_context(data, ckpt.model);
  const auto& samples = a.split == "train" ? data.train : data.test;
  const double r = afem::pipeline::evaluate(ctx, ckpt.state.params, samples);
  fmt::print("R = {:.2f}%  ({} split, {} samples)\n", 100.0 * r, a.split, samples.size());

  if (!a.report_out.empty()) {
    nlohmann::json report = base_report("eval");
    report["config"] = {{"data", data.config.to_json()}, {"train", ckpt.train_config}, {"model", ckpt.model.to_json()}};
    report["seeds"] = {{"data", data.config.seed}, {"init", ckpt.state.params.seed()}};
    report["loss_history"] = ckpt.state.loss_history;
    report["split"] = a.split;
    report["n_samples"] = samples.size();
    report["R"] = r;
    report["wall_clock_seconds"] = seconds_since(t0);
    afem::io::write_report(a.report_out, report);
  }
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const afem::verify::GradcheckOptions& opt) {
  const auto rows = afem::verify::run_gradchecks(opt);
  bool ok = true;
  fmt::print("{:<24} {:<10} {:>12} {:>10}  {}\n", "check", "metric", "value", "threshold", "result");
  for (const auto& r : rows) {
    fmt::print("{:<24} {:<10} {:>12.3e} {:>10.1e}  {}\n", r.name, r.metric, r.value, r.threshold,
               r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? kOk : kNumerical;
}

int cmd_convergence(const std::vector<std::size_t>& levels) {
  const auto table = afem::verify::manufactured_convergence(levels);
  bool ok = true;
  fmt::print("{:>6} {:>14} {:>8}\n", "n", "L2 error", "order");
  for (const auto& l : table) {
    if (std::isnan(l.order)) {
      fmt::print("{:>6} {:>14.6e} {:>8}\n", l.n, l.error, "-");
    } else {
      fmt::print("{:>6} {:>14.6e} {:>8.3f}\n", l.n, l.error, l.order);
      ok = ok && l.order >= 1.9;
    }
  }
  return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable finite elements for the heat-conductivity inverse problem"};
  app.require_subcommand(1);
  app.set_version_flag("--version", AFEM_VERSION);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Generate a synthetic (kappa, u_obs) dataset");
  generate->add_option("--nx", gen.cfg.nx, "Cells along x")->capture_default_str()->check(CLI::PositiveNumber);
  generate->add_option("--ny", gen.cfg.ny, "Cells along y")->capture_default_str()->check(CLI::PositiveNumber);
  generate->add_option("--n-train", gen.cfg.n_train, "Training samples")->capture_default_str()->check(CLI::PositiveNumber);
  generate->add_option("--n-test", gen.cfg.n_test, "Test samples")->capture_default_str()->check(CLI::PositiveNumber);
  generate->add_option("--noise", gen.cfg.noise, "Noise level relative to rms(u)")->capture_default_str()->check(CLI::NonNegativeNumber);
  generate->add_option("--seed", gen.cfg.seed, "Master seed")->capture_default_str();
  generate->add_option("--modes", gen.cfg.modes, "Sine modes per axis")->capture_default_str()->check(CLI::PositiveNumber);
  generate->add_option("--sigma-kappa", gen.cfg.sigma_kappa, "Field amplitude")->capture_default_str()->check(CLI::NonNegativeNumber);
  generate->add_option("--decay", gen.cfg.decay, "Spectral decay exponent")->capture_default_str()->check(CLI::NonNegativeNumber);
  generate->add_option("--out", gen.out, "Output dataset file")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train the conductivity model on a dataset");
  train->add_option("--data", tr.data, "Dataset file")->required();
  train->add_option("--alpha", tr.cfg.alpha, "Weight of the PDE-constrained term")->capture_default_str()->check(CLI::NonNegativeNumber);
  train->add_option("--lr", tr.cfg.lr, "Adam learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  train->add_option("--epochs", tr.cfg.epochs, "Epochs (total, including resumed ones)")->capture_default_str();
  train->add_option("--lr-schedule", tr.cfg.lr_schedule, "Learning-rate schedule")
      ->capture_default_str()
      ->check(CLI::IsMember({"constant", "cosine"}));
  train->add_option("--batch", tr.cfg.batch_size, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--seed", tr.cfg.seed, "Initialization and shuffling seed")->capture_default_str();
  train->add_option("--tol", tr.cfg.tol, "CG relative tolerance")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--ckpt-every", tr.cfg.checkpoint_every, "Checkpoint cadence in epochs (0: end only)")->capture_default_str();
  train->add_option("--arch", tr.arch, "Model architecture")->capture_default_str()->check(CLI::IsMember({"cnn", "mlp"}));
  train->add_option("--resume", tr.resume, "Continue from a checkpoint");
  train->add_option("--log", tr.log, "Plain-text metrics log");
  train->add_option("--ckpt-out", tr.ckpt_out, "Checkpoint output file");
  train->add_option("--report-out", tr.report_out, "JSON report output file");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Report the relative error R of a checkpoint");
  eval->add_option("--data", ev.data, "Dataset file")->required();
  eval->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  eval->add_option("--report-out", ev.report_out, "JSON report output file");
  eval->add_option("--split", ev.split, "Which split to evaluate")->capture_default_str()->check(CLI::IsMember({"train", "test"}));

  afem::verify::GradcheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference and Taylor checks of every adjoint");
  gradcheck->add_option("--nx", gc.nx, "Cells along x")->capture_default_str()->check(CLI::PositiveNumber);
  gradcheck->add_option("--ny", gc.ny, "Cells along y")->capture_default_str()->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed", gc.seed, "Random seed")->capture_default_str();
  gradcheck->add_flag("--inject-bug", gc.inject_bug)->group("");

  std::vector<std::size_t> levels{8, 16, 32, 64};
  auto* convergence = app.add_subcommand("convergence", "Manufactured-solution convergence study");
  convergence->add_option("--levels", levels, "Mesh resolutions, comma separated")
      ->delimiter(',')
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*generate) return cmd_generate(gen);
    if (*train) return cmd_train(tr);
    if (*eval) return cmd_eval(ev);
    if (*gradcheck) return cmd_gradcheck(gc);
    if (*convergence) {
      if (levels.size() < 2) {
        fmt::print(std::cerr, "convergence needs at least two levels\n{}", convergence->help());
        return kUsage;
      }
      return cmd_convergence(levels);
    }
  } catch (const afem::ParseError& e) {
    fmt::print(std::cerr, "parse error: {}\n", e.what());
    return kIo;
  } catch (const afem::IoError& e) {
    fmt::print(std::cerr, "io error: {}\n", e.what());
    return kIo;
  } catch (const afem::CastError& e) {
    fmt::print(std::cerr, "incompatible inputs: {}\n", e.what());
    return kIo;
  } catch (const afem::DomainError& e) {
    fmt::print(std::cerr, "invalid arguments: {}\n", e.what());
    return kUsage;
  } catch (const afem::SolverError& e) {
    fmt::print(std::cerr, "solver failure: {}\n", e.what());
    return kNumerical;
  } catch (const afem::AssemblyError& e) {
    fmt::print(std::cerr, "assembly failure: {}\n", e.what());
    return kNumerical;
  } catch (const afem::DivergenceError& e) {
    fmt::print(std::cerr, "divergence: {}\n", e.what());
    return kNumerical;
  }
  return kUsage;
}
