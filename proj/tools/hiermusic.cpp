// hiermusic: command line front end for the run-directory pipeline.

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hiermusic/pipeline.hpp"

namespace hp = hiermusic::pipeline;
using nlohmann::json;

namespace {

// Dotted key and value into a nested patch: model.lr=0.01 -> {"model":{"lr":0.01}}.
void set_path(json& patch, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("--set", "expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &patch;
  std::size_t start = 0;
  for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) node = &(*node)[key.substr(start, dot - start)];
  (*node)[key.substr(start)] = value;
}

struct Flags {
  std::string run_dir = "run";
  std::string config;
  std::vector<std::string> sets;
  std::string log_level = "warn";
  std::uint64_t seed = 1;
  int epochs = 0;
  double lr = 0, lambda = 0, dropout = 0, temperature = 1;
  int dim = 0, batch = 0, patience = 0, refine = 0;
  std::string strategy;
  bool greedy = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical section-based music generation: data, training, generation and evaluation."};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  auto* o_run = app.add_option("--run-dir", f.run_dir, "Run directory holding artifacts and the echoed config")
                    ->capture_default_str();
  app.add_option("--config", f.config, "JSON config file (overrides the run directory's config.json)");
  app.add_option("--set", f.sets, "Override any config value, e.g. --set model.dim=64 (repeatable)");
  auto* o_seed = app.add_option("--seed", f.seed, "Run seed");
  app.add_option("--log-level", f.log_level, "debug, info, warn, error or off")->capture_default_str();
  (void)o_run;

  std::map<std::string, CLI::App*> cmd;
  auto add = [&](const char* name, const char* help) { return cmd[name] = app.add_subcommand(name, help); };

  // Model/training flags shared by several commands.
  std::map<std::string, CLI::Option*> opt;
  auto training = [&](CLI::App* c) {
    opt[c->get_name() + ".epochs"] = c->add_option("--epochs", f.epochs, "Training epochs");
    opt[c->get_name() + ".lr"] = c->add_option("--lr", f.lr, "Learning rate");
    opt[c->get_name() + ".batch"] = c->add_option("--batch", f.batch, "Batch size");
  };

  std::string toy_out = "toy";
  int toy_count = 20;
  bool toy_noisy = false;
  std::vector<std::string> toy_labels;
  auto* toy = add("toy-corpus", "Write a synthetic annotated corpus (MIDI + .sections sidecars)");
  toy->add_option("--out", toy_out, "Output directory")->capture_default_str();
  toy->add_option("--count", toy_count, "Number of pieces")->capture_default_str();
  toy->add_flag("--noisy", toy_noisy, "Section lengths off the 8/16-bar grid");
  toy->add_option("--labels", toy_labels, "Restrict to these section labels");

  std::vector<std::string> inputs;
  add("ingest", "Quantize MIDI files into the run corpus, with sidecar annotations and a split")
      ->add_option("inputs", inputs, "MIDI files or directories")
      ->required();

  auto* chords = add("chords", "Label every bar with a chord");
  training(chords);

  auto* tfsl = add("train-fsl", "Train the section segmenter on annotated pieces");
  training(tfsl);
  tfsl->add_option("--strategy", f.strategy, "Proposal strategy used for scoring: global or l2r");

  std::string seg_in, seg_out;
  auto* seg = add("segment", "Labelled sections per piece, with piano rolls showing section boxes");
  seg->add_option("--strategy", f.strategy, "global or l2r");
  seg->add_option("--in", seg_in, "Segment this MIDI file instead of the corpus");
  seg->add_option("--out", seg_out, "Output prefix for --in (default: run dir / file stem)");

  auto* pre = add("pretrain-fine", "Train the fine decoders and style vectors");
  training(pre);
  auto* o_dim = pre->add_option("--dim", f.dim, "Model width");
  auto* o_dropout = pre->add_option("--dropout", f.dropout, "Dropout rate");
  auto* o_pat_pre = pre->add_option("--patience", f.patience, "Early stopping patience (epochs)");

  auto* trn = add("train", "Train MSN, aggregation, coarse decoder and style posterior");
  training(trn);
  auto* o_lambda = trn->add_option("--lambda", f.lambda, "Weight of the style bound in the decoding loss");
  auto* o_pat_trn = trn->add_option("--patience", f.patience, "Early stopping patience (epochs)");

  std::string request, gen_out;
  auto* gen = add("generate", "Generate sections from primers and labels");
  gen->add_option("--request", request, "Generation request JSON (default: primers from held-out pieces)");
  gen->add_option("--out", gen_out, "Output directory (default: run dir / generated)");
  auto* o_greedy = gen->add_flag("--greedy", f.greedy, "Greedy decoding instead of sampling");
  auto* o_temp = gen->add_option("--temperature", f.temperature, "Sampling temperature");
  auto* o_refine = gen->add_option("--refine", f.refine, "Coarse refinement rounds");

  std::vector<std::string> generated, reference;
  std::string eval_out;
  auto* ev = add("evaluate", "Metrics of generated MIDI against a reference, with closeness");
  ev->add_option("--generated", generated, "Generated MIDI files or directories (default: run dir / generated)");
  ev->add_option("--reference", reference, "Reference MIDI (default: the run's training split)");
  ev->add_option("--out", eval_out, "Output directory (default: run dir)");

  hp::MaskVizOptions mv;
  std::string mask_out;
  auto* mask = add("mask-viz", "Render an attention mask");
  mask->add_option("--kind", mv.kind, "full, local, dilated, sparse or multiscale")->capture_default_str();
  mask->add_option("--L", mv.L, "Sequence length")->capture_default_str();
  mask->add_option("--window", mv.params.window, "Local window")->capture_default_str();
  mask->add_option("--stride", mv.params.stride, "Dilation stride")->capture_default_str();
  mask->add_flag("--causal", mv.params.causal, "Causal mask");
  mask->add_option("--sections", mv.sections, "Section lengths (multiscale)");
  mask->add_option("--cell", mv.cell, "Pixels per cell")->capture_default_str();
  mask->add_option("--out", mask_out, "Image path, .png or .pgm (default: run dir / mask-<kind>.png)");

  int probe_L = 1024, probe_M = 4;
  auto* ps = add("probe-steps", "Sequential decoding steps: concurrent sections vs one decoder");
  ps->add_option("--L", probe_L, "Total length")->capture_default_str();
  ps->add_option("--sections", probe_M, "Number of equal sections")->capture_default_str();

  hiermusic::model::ErrorProbeConfig epc;
  auto* pe = add("probe-error-accum", "Generated-length perplexity curves: hierarchical vs monolithic");
  pe->add_option("--section-length", epc.section_length, "Tokens per section")->capture_default_str();
  pe->add_option("--sections", epc.sections, "Sections per piece (lengths probed are multiples)")->capture_default_str();
  pe->add_option("--labels", epc.labels, "Grammar labels")->capture_default_str();
  pe->add_option("--train-pieces", epc.train_pieces, "Training pieces")->capture_default_str();
  pe->add_option("--test-pieces", epc.test_pieces, "Held-out pieces")->capture_default_str();
  pe->add_option("--dim", epc.dim, "Model width")->capture_default_str();
  pe->add_option("--epochs", epc.epochs, "Training epochs")->capture_default_str();
  pe->add_option("--lr", epc.lr, "Learning rate")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  using hiermusic::LogLevel;
  static const std::map<std::string, LogLevel> levels = {
      {"debug", LogLevel::debug}, {"info", LogLevel::info}, {"warn", LogLevel::warn}, {"error", LogLevel::error}, {"off", LogLevel::off}};
  if (!levels.count(f.log_level)) {
    std::cerr << "unknown log level '" << f.log_level << "'\n";
    return 2;
  }
  hiermusic::Log::level() = levels.at(f.log_level);

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  const hp::fs::path run(f.run_dir);
  try {
    // defaults < run dir config < --config < flags
    std::vector<json> patches;
    if (hp::fs::exists(run / "config.json")) patches.push_back(hp::read_json(run / "config.json"));
    if (!f.config.empty()) patches.push_back(hp::read_json(f.config));
    json flags = json::object();
    if (o_seed->count()) flags["seed"] = f.seed;
    if (!f.strategy.empty()) flags["strategy"] = f.strategy;
    auto given = [&](const std::string& k) { return opt.count(name + "." + k) && opt.at(name + "." + k)->count(); };
    const std::string section = name == "chords" ? "chords" : name == "train-fsl" ? "fsl" : "model";
    if (given("epochs"))
      flags[section][name == "pretrain-fine" ? "fine_epochs" : name == "train" ? "coarse_epochs" : "epochs"] = f.epochs;
    if (given("lr")) flags[section]["lr"] = f.lr;
    if (given("batch")) flags[section]["batch"] = f.batch;
    if (o_dim->count()) flags["model"]["dim"] = f.dim;
    if (o_dropout->count()) flags["model"]["dropout"] = f.dropout;
    if (o_pat_pre->count() || o_pat_trn->count()) flags["model"]["patience"] = f.patience;
    if (o_lambda->count()) flags["model"]["lambda"] = f.lambda;
    if (o_greedy->count()) flags["generation"]["greedy"] = f.greedy;
    if (o_temp->count()) flags["generation"]["temperature"] = f.temperature;
    if (o_refine->count()) flags["generation"]["refine_rounds"] = f.refine;
    for (const auto& s : f.sets) set_path(flags, s);
    patches.push_back(flags);
    const auto cfg = hp::resolve_config(patches);
    hp::echo_config(run, cfg);

    json out;
    if (name == "toy-corpus") {
      hiermusic::synth::ToyOptions to;
      to.noisy = toy_noisy;
      for (const auto& l : toy_labels) to.labels.push_back(hp::label_index(cfg, l));
      out = hp::make_toy_files(toy_out, toy_count, cfg.seed, to);
    } else if (name == "ingest") {
      out = hp::ingest(run, cfg, inputs);
    } else if (name == "chords") {
      out = hp::chords(run, cfg);
    } else if (name == "train-fsl") {
      out = hp::train_fsl(run, cfg);
    } else if (name == "segment") {
      if (!seg_in.empty()) {
        const auto prefix = seg_out.empty() ? run / hp::fs::path(seg_in).stem() : hp::fs::path(seg_out);
        out = hp::segment_file(run, cfg, seg_in, prefix);
      } else {
        out = hp::segment(run, cfg);
      }
    } else if (name == "pretrain-fine") {
      out = hp::pretrain_fine(run, cfg);
    } else if (name == "train") {
      out = hp::train(run, cfg);
    } else if (name == "generate") {
      std::optional<json> req;
      if (!request.empty()) req = hp::read_json(request);
      out = hp::generate(run, cfg, req, gen_out.empty() ? run / "generated" : hp::fs::path(gen_out));
    } else if (name == "evaluate") {
      if (generated.empty()) generated.push_back((run / "generated").string());
      const auto r = hp::evaluate(run, cfg, generated, reference, eval_out.empty() ? run : hp::fs::path(eval_out));
      std::cout << r.table();
      return 0;
    } else if (name == "mask-viz") {
      out = hp::mask_viz(mv, mask_out.empty() ? run / ("mask-" + mv.kind + ".png") : hp::fs::path(mask_out));
    } else if (name == "probe-steps") {
      out = hp::probe_steps(probe_L, probe_M, cfg.seed, cfg.bar_length, cfg.model.note_window);
      hp::write_json(run / "steps.json", out);
      std::cout << hp::steps_table(out);
      return 0;
    } else if (name == "probe-error-accum") {
      epc.seed = cfg.seed;
      out = hp::probe_error_accum(epc);
      hp::write_json(run / "error_accum.json", out);
      hp::write_text(run / "error_accum.txt", hp::error_accum_table(out));
      std::cout << hp::error_accum_table(out);
      return 0;
    }
    std::cout << out.dump(2) << '\n';
    return 0;
  } catch (const hiermusic::InvariantError& e) {
    std::cerr << "invariant violated: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << name << ": " << e.what() << '\n';
    return 1;
  }
}
