#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "zhmf/commands.hpp"
#include "zhmf/errors.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::string out;
  std::string checkins;
  std::string variant;
  std::string backend;
  std::string script;
  std::string endpoint;
  std::string model;
  std::string scope;
  std::string outcomes;
  std::string format = "table";
  std::size_t k = 0;
  std::size_t reflection_n = 0;
  std::size_t max_steps = 0;
  int concurrency = 0;
  double zero_shot_fraction = 0.0;
  bool capture_prompts = false;
  bool macro = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "config JSON file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "override output_dir");
}

void add_backend_opts(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--backend", o.backend, "override backend.kind (scripted|http)");
  cmd->add_option("--script", o.script, "override backend.script");
  cmd->add_option("--endpoint", o.endpoint, "override backend.endpoint");
  cmd->add_option("--model", o.model, "override backend.model");
  cmd->add_flag("--capture-prompts", o.capture_prompts,
                "record every prompt/response pair");
  cmd->add_option("--max-steps", o.max_steps, "cap the number of prediction steps");
}

// True when the option exists on this subcommand and the user passed it.
bool given(const CLI::App* cmd, const std::string& name) {
  const CLI::Option* opt = cmd->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

zhmf::AppConfig resolve(const CLI::App* cmd, const Overrides& o) {
  zhmf::AppConfig config = zhmf::load_config(o.config_path);
  if (given(cmd, "--out")) config.output_dir = o.out;
  if (given(cmd, "--checkins")) config.data.checkins = o.checkins;
  if (given(cmd, "--zero-shot-fraction")) {
    config.data.zero_shot_fraction = o.zero_shot_fraction;
  }
  if (given(cmd, "--variant")) {
    config.run.variant = zhmf::variant_from_string(o.variant);
  }
  if (given(cmd, "--k")) config.run.k = o.k;
  if (given(cmd, "--n")) config.run.reflection_n = o.reflection_n;
  if (given(cmd, "--concurrency")) config.run.concurrency = o.concurrency;
  if (given(cmd, "--backend")) config.backend.kind = o.backend;
  if (given(cmd, "--script")) {
    config.backend.script = o.script;
    if (!given(cmd, "--backend")) config.backend.kind = "scripted";
  }
  if (given(cmd, "--endpoint")) config.backend.endpoint = o.endpoint;
  if (given(cmd, "--model")) config.backend.model = o.model;
  if (given(cmd, "--capture-prompts")) config.capture_prompts = true;
  if (given(cmd, "--max-steps")) config.max_steps = o.max_steps;
  if (given(cmd, "--scope")) config.scope = o.scope;
  if (given(cmd, "--macro")) config.run.macro_over_users = true;
  zhmf::validate(config.run);
  zhmf::scope_from_string(config.scope);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zero-shot next check-in prediction"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "zhmf 0.1.0");

  Overrides pre_o, build_o, run_o, eval_o;

  CLI::App* pre = app.add_subcommand(
      "preprocess", "parse raw check-ins into splits and cohorts");
  add_common(pre, pre_o);
  pre->add_option("--checkins", pre_o.checkins, "override data.checkins")
      ->check(CLI::ExistingFile);
  pre->add_option("--zero-shot-fraction", pre_o.zero_shot_fraction,
                  "override data.zero_shot_fraction");

  CLI::App* build = app.add_subcommand(
      "build-memory", "build the retrieval pool and learn lessons");
  add_common(build, build_o);
  add_backend_opts(build, build_o);

  CLI::App* run =
      app.add_subcommand("run", "predict over the test split (auto-resumes)");
  add_common(run, run_o);
  add_backend_opts(run, run_o);
  run->add_option("--variant", run_o.variant,
                  "override run.variant (full|no_reflection|one_stage)");
  run->add_option("--k", run_o.k, "override run.k (categories per step)");
  run->add_option("--n", run_o.reflection_n,
                  "override run.reflection_n (lessons per prompt)");
  run->add_option("--scope", run_o.scope,
                  "users to evaluate (all|exclude_zero_shot|zero_shot_only)");
  run->add_option("--concurrency", run_o.concurrency,
                  "override run.concurrency");

  CLI::App* eval = app.add_subcommand("eval", "aggregate outcomes into reports");
  add_common(eval, eval_o);
  eval->add_option("--outcomes", eval_o.outcomes,
                   "outcomes file (default <out>/outcomes.jsonl)")
      ->check(CLI::ExistingFile);
  eval->add_option("--format", eval_o.format, "stdout format (table|jsonl)");
  eval->add_flag("--macro", eval_o.macro, "average per user instead of per step");

  pre->callback([&] { std::cout << zhmf::cmd_preprocess(resolve(pre, pre_o)); });
  build->callback(
      [&] { std::cout << zhmf::cmd_build_memory(resolve(build, build_o)); });
  run->callback([&] { std::cout << zhmf::cmd_run(resolve(run, run_o)); });
  eval->callback([&] {
    std::optional<std::filesystem::path> outcomes;
    if (eval->count("--outcomes")) outcomes = eval_o.outcomes;
    std::cout << zhmf::cmd_eval(resolve(eval, eval_o), outcomes, eval_o.format);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const zhmf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const zhmf::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  } catch (const zhmf::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const zhmf::BackendError& e) {
    std::cerr << "backend error: " << e.what() << '\n';
    return 4;
  } catch (const zhmf::StateError& e) {
    std::cerr << "state error: " << e.what() << '\n';
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 70;
  }
  return 0;
}
