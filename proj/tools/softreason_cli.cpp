// Command-line front end: data generation, parsing, priors, training,
// inference, analysis and gradient checking.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "softreason/analytics.hpp"
#include "softreason/objective.hpp"

using namespace softreason;

namespace {

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

Dataset load_all(const std::vector<std::string>& paths) {
  Dataset all;
  for (const auto& p : paths) {
    Dataset d = load_jsonl(p);
    all.instances.insert(all.instances.end(), d.instances.begin(), d.instances.end());
    all.provenance += (all.provenance.empty() ? "" : ",") + p;
  }
  return all;
}

// Loads --vocab when given, otherwise derives the vocabulary from `data`.
Vocabulary resolve_vocab(const std::string& vocab_path, const Dataset& data) {
  return vocab_path.empty() ? build_vocab(data) : load_vocab(vocab_path);
}

Dataset load_tokenized(const std::string& path, const Vocabulary& v) {
  Dataset d = load_jsonl(path);
  tokenize_dataset(d, v);
  return d;
}

ReasonerParams load_model(const std::string& path, const Vocabulary& v) {
  ReasonerParams p = load_checkpoint(path);
  if (p.vocab != v.size()) {
    throw Error("checkpoint vocabulary size " + std::to_string(p.vocab) + " does not match vocabulary (" +
                std::to_string(v.size()) + ")");
  }
  return p;
}

LossWeights parse_weights(const std::string& s) {
  std::vector<double> w;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      w.push_back(std::stod(part));
    } catch (const std::exception&) {
      throw Error("bad weight '" + part + "'");
    }
  }
  if (w.size() != 3) throw Error("--weights expects three comma-separated values ce,kl,sem");
  LossWeights out{w[0], w[1], w[2]};
  validate(out);
  return out;
}

struct SamplingFlags {
  double temperature = SamplingConfig{}.temperature;
  double top_p = SamplingConfig{}.top_p;
  std::size_t max_latent_steps = SamplingConfig{}.max_latent_steps;
  bool greedy = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--temperature", temperature, "Latent sampling temperature")->capture_default_str();
    cmd->add_option("--top-p", top_p, "Nucleus mass kept at each latent step")->capture_default_str();
    cmd->add_option("--max-latent-steps", max_latent_steps, "Cap on soft tokens per question")->capture_default_str();
    cmd->add_flag("--greedy", greedy, "Feed the argmax token instead of the filtered mixture");
  }
  SamplingConfig config() const { return {temperature, top_p, max_latent_steps, greedy}; }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft-token latent reasoning toolkit"};
  app.require_subcommand(1);
  std::uint64_t seed = 777;
  std::string vocab_path;
  app.add_option("--seed", seed, "Random seed")->capture_default_str();
  app.add_option("--vocab", vocab_path, "Vocabulary file (vocab.json)");
  // Subcommands accept the global flags after their name as well.
  app.fallthrough();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic arithmetic chains as JSONL");
  SynthConfig synth;
  std::string gen_config, gen_out, gen_val_out;
  double gen_val_fraction = 0.1;
  gen->add_option("--config", gen_config, "Generator config JSON (flags override it)");
  gen->add_option("--out", gen_out, "Output JSONL")->required();
  gen->add_option("--val-out", gen_val_out, "Also write a held-out split here");
  gen->add_option("--val-fraction", gen_val_fraction, "Held-out fraction when --val-out is set")->capture_default_str();
  auto* o_count = gen->add_option("--count", synth.count, "Number of instances");
  auto* o_min = gen->add_option("--min-steps", synth.min_steps, "Minimum reasoning steps");
  auto* o_max = gen->add_option("--max-steps", synth.max_steps, "Maximum reasoning steps");
  auto* o_lo = gen->add_option("--operand-lo", synth.operand_lo, "Smallest operand");
  auto* o_hi = gen->add_option("--operand-hi", synth.operand_hi, "Largest operand");
  auto* o_ops = gen->add_option("--ops", synth.operators, "Operators drawn from +-*/");

  // parse
  auto* parse = app.add_subcommand("parse", "Build vocab.json and parsed steps from datasets");
  std::vector<std::string> parse_in;
  std::string parse_steps;
  parse->add_option("--in", parse_in, "Input JSONL (repeatable)")->required();
  parse->add_option("--steps", parse_steps, "Write per-instance parsed steps as JSONL");

  // priors
  auto* pri = app.add_subcommand("priors", "Build rule-based step priors");
  PriorConfig pcfg;
  std::string pri_method = "mix", pri_in, pri_out;
  pri->add_option("--method", pri_method, "temp | gumbel | mix | uniform | random")->capture_default_str();
  pri->add_option("--tau", pcfg.tau, "Temperature")->capture_default_str();
  pri->add_option("--beta-op", pcfg.beta_op, "Operational-token logit")->capture_default_str();
  pri->add_option("--beta-res", pcfg.beta_res, "Result-token logit")->capture_default_str();
  pri->add_option("--lambda", pcfg.lambda, "Mixture weight on operational tokens")->capture_default_str();
  pri->add_option("--k", pcfg.k, "Focus set size")->capture_default_str();
  pri->add_option("--delta", pcfg.delta, "Focus probability threshold")->capture_default_str();
  pri->add_flag("--hard", pcfg.hard, "Straight-through one-hot Gumbel priors");
  pri->add_option("--in", pri_in, "Input JSONL")->required();
  pri->add_option("--out", pri_out, "Output priors.jsonl")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train the reasoner");
  std::string tr_config, tr_data, tr_val, tr_priors, tr_ckpt, tr_hist;
  std::size_t tr_epochs = 0;
  tr->add_option("--config", tr_config, "Training config JSON");
  tr->add_option("--data", tr_data, "Training JSONL")->required();
  tr->add_option("--val", tr_val, "Validation JSONL (default: split off val_fraction of --data)");
  tr->add_option("--priors", tr_priors, "priors.jsonl aligned with --data")->required();
  tr->add_option("--out-ckpt", tr_ckpt, "Checkpoint to write")->required();
  tr->add_option("--history-csv", tr_hist, "Per-epoch history CSV");
  auto* o_epochs = tr->add_option("--epochs", tr_epochs, "Override the configured epoch count");

  // infer
  auto* inf = app.add_subcommand("infer", "Answer questions with a trained checkpoint");
  std::string inf_ckpt, inf_data, inf_question, inf_out;
  SamplingFlags inf_sampling;
  inf->add_option("--ckpt", inf_ckpt, "Checkpoint")->required();
  auto* o_inf_data = inf->add_option("--data", inf_data, "JSONL of questions with reference answers");
  inf->add_option("--question", inf_question, "Single whitespace-tokenized question")->excludes(o_inf_data);
  inf->add_option("--out", inf_out, "Predictions JSONL (default: stdout)");
  inf_sampling.attach(inf);

  // analyze
  auto* an = app.add_subcommand("analyze", "Latent-dynamics statistics over a dataset");
  std::string an_ckpt, an_data, an_out, an_json, an_traces;
  SamplingFlags an_sampling;
  an->add_option("--ckpt", an_ckpt, "Checkpoint")->required();
  an->add_option("--data", an_data, "JSONL dataset")->required();
  an->add_option("--out", an_out, "Per-step statistics CSV")->required();
  an->add_option("--json", an_json, "Also write the full report as JSON");
  an->add_option("--traces", an_traces, "Dump per-instance top-10 traces as JSONL");
  an_sampling.attach(an);

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Compare analytic gradients with central differences");
  std::string gc_data, gc_priors, gc_weights = "1,1,1";
  std::size_t gc_index = 0, gc_samples = 200, gc_embed = 16, gc_hidden = 32;
  double gc_eps = 1e-5, gc_tol = 1e-4, gc_scale = 0.5;
  bool gc_tf = false, gc_vocab_space = false;
  gc->add_option("--data", gc_data, "JSONL dataset")->required();
  gc->add_option("--priors", gc_priors, "priors.jsonl (default: Mix priors built on the fly)");
  gc->add_option("--index", gc_index, "Instance to check")->capture_default_str();
  gc->add_option("--weights", gc_weights, "Loss weights ce,kl,sem")->capture_default_str();
  gc->add_option("--eps", gc_eps, "Finite-difference step")->capture_default_str();
  gc->add_option("--samples", gc_samples, "Parameters to probe")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "Fail above this relative error")->capture_default_str();
  gc->add_option("--embed-dim", gc_embed, "Embedding width")->capture_default_str();
  gc->add_option("--hidden", gc_hidden, "Hidden width")->capture_default_str();
  gc->add_option("--init-scale", gc_scale, "Uniform init half-width")->capture_default_str();
  gc->add_flag("--teacher-forcing", gc_tf, "Feed prior mixtures as latent inputs");
  gc->add_flag("--vocab-space", gc_vocab_space, "Semantic loss over head logits instead of hidden states");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      if (!gen_config.empty()) {
        const SynthConfig from_file = synth_config_from_json(read_json_file(gen_config));
        // Flags given on the command line win over the file.
        SynthConfig merged = from_file;
        if (*o_count) merged.count = synth.count;
        if (*o_min) merged.min_steps = synth.min_steps;
        if (*o_max) merged.max_steps = synth.max_steps;
        if (*o_lo) merged.operand_lo = synth.operand_lo;
        if (*o_hi) merged.operand_hi = synth.operand_hi;
        if (*o_ops) merged.operators = synth.operators;
        synth = merged;
      }
      if (app.get_option("--seed")->count() > 0 || gen_config.empty()) synth.seed = seed;
      const Dataset d = gen_synthetic(synth);
      if (gen_val_out.empty()) {
        save_jsonl(d, gen_out);
        std::cerr << "wrote " << d.size() << " instances to " << gen_out << "\n";
      } else {
        const Split s = split_dataset(d, 1.0 - gen_val_fraction, gen_val_fraction, 0.0, synth.seed);
        save_jsonl(s.train, gen_out);
        save_jsonl(s.val, gen_val_out);
        std::cerr << "wrote " << s.train.size() << " + " << s.val.size() << " instances\n";
      }
    } else if (*parse) {
      if (vocab_path.empty()) throw Error("parse requires --vocab for its output");
      const Dataset d = load_all(parse_in);
      const Vocabulary v = build_vocab(d);
      save_vocab(v, vocab_path);
      if (!parse_steps.empty()) {
        std::string out;
        for (std::size_t i = 0; i < d.size(); ++i) {
          nlohmann::ordered_json j;
          j["index"] = i;
          nlohmann::ordered_json steps = nlohmann::ordered_json::array();
          for (const auto& s : parse_chain(d.instances[i].chain, v)) {
            steps.push_back({{"step", s.index}, {"operational", s.operational_ids}, {"result", s.result_ids}});
          }
          j["steps"] = std::move(steps);
          out += j.dump() + "\n";
        }
        write_text(parse_steps, out);
      }
      std::cerr << "vocabulary of " << v.size() << " tokens from " << d.size() << " instances\n";
    } else if (*pri) {
      pcfg.method = prior_method_from_string(pri_method);
      pcfg.seed = seed;
      const Dataset d = load_jsonl(pri_in);
      const Vocabulary v = resolve_vocab(vocab_path, d);
      save_priors(build_dataset_priors(d, v, pcfg), pri_out);
      std::cerr << "wrote priors for " << d.size() << " instances to " << pri_out << "\n";
    } else if (*tr) {
      TrainConfig cfg = tr_config.empty() ? TrainConfig{} : train_config_from_json(read_json_file(tr_config));
      if (app.get_option("--seed")->count() > 0 || tr_config.empty()) cfg.seed = seed;
      if (*o_epochs) cfg.epochs = tr_epochs;
      Dataset data = load_jsonl(tr_data);
      const Vocabulary v = resolve_vocab(vocab_path, data);
      tokenize_dataset(data, v);
      const auto all_priors = load_priors(tr_priors);
      if (all_priors.size() != data.size()) {
        throw Error("priors file has " + std::to_string(all_priors.size()) + " entries for " +
                    std::to_string(data.size()) + " instances");
      }
      Dataset train, val;
      std::vector<InstancePriors> priors;
      if (!tr_val.empty()) {
        train = std::move(data);
        priors = all_priors;
        val = load_tokenized(tr_val, v);
      } else {
        const Split s = split_dataset(data, 1.0 - cfg.val_fraction, cfg.val_fraction, 0.0, cfg.seed);
        train = s.train;
        val = s.val;
        for (std::size_t i : s.train_index) priors.push_back(all_priors[i]);
      }
      const auto res = train_epochs(train, val, priors, v.size(), cfg, [](const EpochRecord& r) {
        std::cerr << "epoch " << r.epoch << " l_total " << format_fixed(r.l_total, 4) << " l_ce "
                  << format_fixed(r.l_ce, 4) << " val_acc " << format_fixed(r.val_acc, 4) << "\n";
      });
      save_checkpoint(res.params, tr_ckpt);
      if (!tr_hist.empty()) write_text(tr_hist, history_csv(res.history));
      std::cerr << "best epoch " << res.best_epoch << ", checkpoint written to " << tr_ckpt << "\n";
    } else if (*inf) {
      if (vocab_path.empty()) throw Error("infer requires --vocab");
      if (inf_data.empty() && inf_question.empty()) throw Error("infer requires --data or --question");
      const Vocabulary v = load_vocab(vocab_path);
      const ReasonerParams p = load_model(inf_ckpt, v);
      const SamplingConfig sc = inf_sampling.config();
      std::string out;
      if (!inf_question.empty()) {
        const LatentTrace t = infer(tokenize(inf_question, v), p, sc);
        nlohmann::ordered_json j;
        j["question"] = inf_question;
        j["prediction"] = detokenize(t.answer_ids, v);
        j["termination_step"] = t.termination_step;
        j["truncated"] = t.truncated;
        out = j.dump() + "\n";
      } else {
        const Dataset d = load_tokenized(inf_data, v);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < d.size(); ++i) {
          const auto& inst = d.instances[i];
          const LatentTrace t = infer(inst.question_ids, p, sc);
          const bool ok = t.answer_ids == inst.answer_ids;
          correct += ok;
          nlohmann::ordered_json j;
          j["index"] = i;
          j["question"] = inst.question;
          j["prediction"] = detokenize(t.answer_ids, v);
          j["answer"] = inst.answer;
          j["correct"] = ok;
          j["steps"] = inst.step_count;
          j["termination_step"] = t.termination_step;
          j["truncated"] = t.truncated;
          out += j.dump() + "\n";
        }
        std::cerr << "exact match " << correct << "/" << d.size() << " = "
                  << format_fixed(d.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(d.size()), 4)
                  << "\n";
      }
      if (inf_out.empty()) {
        std::cout << out;
      } else {
        write_text(inf_out, out);
      }
    } else if (*an) {
      if (vocab_path.empty()) throw Error("analyze requires --vocab");
      const Vocabulary v = load_vocab(vocab_path);
      const ReasonerParams p = load_model(an_ckpt, v);
      const Dataset d = load_tokenized(an_data, v);
      std::vector<LatentTrace> traces;
      evaluate(d, p, an_sampling.config(), &traces);
      const BatchStats b = compute_batch_stats(traces);
      emit_report(b, an_out, ReportFormat::Csv);
      if (!an_json.empty()) emit_report(b, an_json, ReportFormat::Json, &v);
      if (!an_traces.empty()) {
        std::string out;
        for (std::size_t i = 0; i < traces.size(); ++i) out += trace_to_json(traces[i], i, &v).dump() + "\n";
        write_text(an_traces, out);
      }
      std::cerr << b.samples << " latent steps, mean top-1 " << format_fixed(b.mean_top1, 4) << ", mean entropy "
                << format_fixed(b.mean_entropy, 4) << ", pearson r " << format_fixed(b.pearson_r, 4) << "\n";
    } else if (*gc) {
      Dataset d = load_jsonl(gc_data);
      const Vocabulary v = resolve_vocab(vocab_path, d);
      tokenize_dataset(d, v);
      if (gc_index >= d.size()) throw Error("--index out of range");
      InstancePriors pr;
      if (gc_priors.empty()) {
        PriorConfig pc;
        pc.seed = seed;
        pr = build_instance_priors(d.instances[gc_index], v, pc, gc_index);
      } else {
        const auto all = load_priors(gc_priors);
        if (gc_index >= all.size()) throw Error("priors file has no entry for --index");
        pr = all[gc_index];
      }
      const ReasonerParams p = ReasonerParams::init(v.size(), gc_embed, gc_hidden, seed, gc_scale);
      const RolloutConfig rc{parse_weights(gc_weights), gc_tf, gc_vocab_space ? SemSpace::Vocab : SemSpace::Hidden};
      const auto res = gradient_check(p, d.instances[gc_index], pr, rc, gc_eps, gc_samples, seed);
      std::cout << "checked " << res.checked << " parameters, max relative error "
                << format_significant(res.max_relative_error, 6) << "\n";
      if (!(res.max_relative_error < gc_tol)) {
        std::cerr << "gradient check failed at parameter " << res.worst_index << ": analytic "
                  << format_significant(res.worst_analytic, 12) << " numeric "
                  << format_significant(res.worst_numeric, 12) << "\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
