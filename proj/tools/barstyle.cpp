// Command-line entry point: tokenization, attributes, corpora, training, transfer, evaluation, serving.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "barstyle/attributes.hpp"
#include "barstyle/corpus.hpp"
#include "barstyle/decode.hpp"
#include "barstyle/experiments.hpp"
#include "barstyle/midi_io.hpp"
#include "barstyle/remi.hpp"
#include "barstyle/vae.hpp"
#include "barstyle/service.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace barstyle;

namespace {

struct Global {
  std::uint64_t seed = 0;
  bool quiet = false;
};

Global g_opts;

void log_line(const std::string& msg) {
  if (!g_opts.quiet) std::cerr << msg << std::endl;
}

/// Writes to `path`, or to stdout when it is empty or "-".
void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

bool is_token_file(const std::string& path) {
  auto ext = fs::path(path).extension().string();
  return ext == ".tokens" || ext == ".txt";
}

QuantizedScore read_midi_score(const std::string& path, int B) {
  return quantize(parse_midi(read_file_bytes(path)), B);
}

void write_midi_file(const std::string& path, const QuantizedScore& q) { write_file_bytes(path, write_midi(q)); }

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

/// A uniform override, or per-bar ones from a file (one per line).
std::vector<AttributeOverride> overrides_for(const std::string& uniform, const std::string& file, std::size_t K) {
  if (!uniform.empty() && !file.empty()) throw CLI::ValidationError("give a uniform override or a file, not both");
  if (!file.empty()) {
    auto lines = read_lines(file);
    if (lines.size() != K)
      throw LengthMismatch(file + " has " + std::to_string(lines.size()) + " overrides for " + std::to_string(K) + " bars");
    std::vector<AttributeOverride> out;
    for (const auto& l : lines) out.push_back(AttributeOverride::parse(l));
    return out;
  }
  if (uniform.empty()) return {};
  return std::vector<AttributeOverride>(K, AttributeOverride::parse(uniform));
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// ---- tokenize ----------------------------------------------------------------------

struct TokenizeArgs {
  std::string input, output;
  bool reverse = false;
  int sub_beats = 16;
};

int run_tokenize(const TokenizeArgs& a) {
  Vocab vocab(a.sub_beats);
  if (a.reverse) {
    if (a.output.empty()) throw CLI::ValidationError("--reverse needs -o <file.mid>");
    auto tokens = read_token_file(a.input, vocab);
    auto res = detokenize(tokens, vocab);
    write_midi_file(a.output, res.score);
    log_line("wrote " + std::to_string(res.score.bars.size()) + " bars to " + a.output);
    return 0;
  }
  auto q = read_midi_score(a.input, a.sub_beats);
  auto seq = tokenize(q, vocab);
  emit(a.output, to_token_text(seq.tokens, vocab, "source: " + fs::path(a.input).filename().string()));
  log_line(std::to_string(seq.tokens.size()) + " tokens, " + std::to_string(seq.num_bars()) + " bars");
  return 0;
}

// ---- attrs -------------------------------------------------------------------------

struct AttrsArgs {
  std::string input, output, corpus, ckpt;
  int sub_beats = 16;
};

AttributeBins bins_from(const std::string& corpus, const std::string& ckpt) {
  if (!ckpt.empty()) return get_bins(load_checkpoint(ckpt).config, AttributeBins::reference());
  if (!corpus.empty()) return load_corpus(corpus).bins;
  return AttributeBins::reference();
}

int run_attrs(const AttrsArgs& a) {
  Vocab vocab(a.sub_beats);
  QuantizedScore q = is_token_file(a.input) ? detokenize(read_token_file(a.input, vocab), vocab).score
                                            : read_midi_score(a.input, a.sub_beats);
  emit(a.output, attributes_to_csv(compute_attributes(q, bins_from(a.corpus, a.ckpt))));
  return 0;
}

// ---- corpora -----------------------------------------------------------------------

struct SynthArgs {
  std::string output;
  int pieces = 200, bars = 16, sub_beats = 16;
};

void describe(const Corpus& c) {
  log_line(std::to_string(c.pieces.size()) + " pieces: train " + std::to_string(c.in_split(Split::Train).size()) + ", val " +
           std::to_string(c.in_split(Split::Val).size()) + ", test " + std::to_string(c.in_split(Split::Test).size()));
}

int run_synth(const SynthArgs& a) {
  Corpus c = generate_synthetic({a.pieces, a.bars, a.sub_beats, g_opts.seed});
  save_corpus(c, a.output);
  describe(c);
  return 0;
}

struct IngestArgs {
  std::string input, output;
  int sub_beats = 16;
};

int run_ingest(const IngestArgs& a) {
  IngestReport report;
  Corpus c = ingest(a.input, a.sub_beats, g_opts.seed, &report);
  for (const auto& [path, why] : report.skipped) log_line("skipped " + path + ": " + why);
  save_corpus(c, a.output);
  describe(c);
  return 0;
}

// ---- train -------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus, output, log_file, preset = "toy";
  long steps = 20000;
  long save_every = 0;
  long log_every = 100;
  bool resume = false;
  std::optional<int> layers, heads, d_model, d_ff, d_z, d_attr;
  VaeTrainConfig tc;
};

VaeConfig model_config(const TrainArgs& a, int vocab, int B) {
  VaeConfig c;
  if (a.preset == "toy") {
    c = VaeConfig::toy(vocab, B);
  } else if (a.preset == "reference") {
    c = VaeConfig::reference(vocab);
    c.sub_beats_per_bar = B;
  } else {
    throw CLI::ValidationError("--preset must be toy or reference");
  }
  for (StackConfig* s : {&c.encoder, &c.decoder}) {
    if (a.layers) s->layers = *a.layers;
    if (a.heads) s->heads = *a.heads;
    if (a.d_model) s->d_model = s->d_embed = *a.d_model;
    if (a.d_ff) s->d_ff = *a.d_ff;
  }
  if (a.d_z) c.d_z = *a.d_z;
  if (a.d_attr) c.d_attr = *a.d_attr;
  return c;
}

int run_train(TrainArgs a) {
  Corpus corpus = load_corpus(a.corpus);
  auto train = corpus.attributed(Split::Train);
  if (train.empty()) throw EmptyCorpus("the training split is empty");
  Vocab vocab(corpus.sub_beats_per_bar);

  long start = 0;
  ad::AdamState opt;
  std::optional<StyleVae> model;
  if (a.resume && fs::exists(fs::path(a.output) / "manifest.txt")) {
    CheckpointData data;
    model.emplace(StyleVae::load(a.output, &opt, &data));
    start = data.step;
    a.tc = VaeTrainConfig::from_kv(data.config.section("train."), a.tc);
    log_line("resuming from step " + std::to_string(start));
  } else {
    a.tc.seed = g_opts.seed;
    model.emplace(model_config(a, vocab.size(), corpus.sub_beats_per_bar), g_opts.seed);
  }
  a.tc = VaeTrainConfig::from_kv({}, a.tc);  // validates
  VaeTrainer trainer(*model, a.tc);
  if (start > 0) {
    opt.config = trainer.optimizer().config;
    trainer.optimizer() = opt;
  }

  std::ofstream log_out;
  if (!a.log_file.empty()) {
    log_out.open(a.log_file, std::ios::app);
    if (!log_out) throw IoError("cannot write " + a.log_file);
  }
  KeyValues extra = a.tc.to_kv().prefixed("train.");
  put_bins(extra, corpus.bins);
  auto save = [&](long step) {
    model->save(a.output, step, &trainer.optimizer(), extra);
    log_line("saved step " + std::to_string(step) + " to " + a.output);
  };

  double nll = 0, kl = 0;
  long seen = 0;
  const auto t0 = std::chrono::steady_clock::now();
  train_vae(*model, trainer, train, start, std::max(0L, a.steps - start), [&](const VaeStepStats& s) {
    nll += s.nll;
    kl += s.kl_raw;
    ++seen;
    const long done = s.step + 1;
    if (done % a.log_every == 0 || done == a.steps) {
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::string line = "step=" + std::to_string(done) + " lr=" + fmt(s.lr, 7) + " beta=" + fmt(s.beta) +
                         " nll=" + fmt(nll / seen) + " kl=" + fmt(kl / seen) + " elapsed=" + fmt(secs, 1);
      log_line(line);
      if (log_out) log_out << line << std::endl;
      nll = kl = 0;
      seen = 0;
    }
    if (a.save_every > 0 && done % a.save_every == 0 && done != a.steps) save(done);
  });
  save(std::max(start, a.steps));
  return 0;
}

// ---- transfer ----------------------------------------------------------------------

struct TransferArgs {
  std::string input, ckpt, output, rhym, poly, rhym_file, poly_file, attrs_out, tokens_out;
  int window = 16;
  SamplingConfig sampling;
};

int run_transfer(TransferArgs a) {
  CheckpointData data;
  StyleVae model = StyleVae::load(a.ckpt, nullptr, &data);
  const int B = model.config().sub_beats_per_bar;
  AttributeBins bins = get_bins(data.config, AttributeBins::reference());
  Vocab vocab(B);
  QuantizedScore q = is_token_file(a.input) ? detokenize(read_token_file(a.input, vocab), vocab).score
                                            : read_midi_score(a.input, B);
  TokenSeq src = tokenize(q, vocab);
  auto source = compute_attributes(q, bins);
  const std::size_t K = source.size();
  TransferRequest req;
  req.tokens = src.tokens;
  for (const auto& s : source) {
    req.source_rhythm.push_back(s.a_rhym);
    req.source_polyphony.push_back(s.a_poly);
  }
  req.rhythm = overrides_for(a.rhym, a.rhym_file, K);
  req.polyphony = overrides_for(a.poly, a.poly_file, K);
  req.window = a.window;
  req.sampling = a.sampling;
  req.sampling.seed = g_opts.seed;
  TransferResult res = style_transfer(model, req);
  QuantizedScore out = detokenize(res.seq.tokens, vocab).score;
  write_midi_file(a.output, out);
  auto achieved = compute_attributes(out, bins);
  if (!a.attrs_out.empty()) write_attribute_file(a.attrs_out, achieved);
  if (!a.tokens_out.empty()) write_token_file(a.tokens_out, res.seq.tokens, vocab);
  std::cout << "bar,source_rhythm,target_rhythm,achieved_rhythm,source_polyphony,target_polyphony,achieved_polyphony\n";
  for (std::size_t k = 0; k < K; ++k)
    std::cout << k << ',' << req.source_rhythm[k] << ',' << res.target_rhythm[k] << ',' << achieved[k].a_rhym << ','
              << req.source_polyphony[k] << ',' << res.target_polyphony[k] << ',' << achieved[k].a_poly << '\n';
  if (!res.truncated_bars.empty()) log_line(std::to_string(res.truncated_bars.size()) + " bars hit the per-bar token cap");
  log_line("wrote " + std::to_string(out.bars.size()) + " bars to " + a.output);
  return 0;
}

// ---- evaluate ----------------------------------------------------------------------

struct EvaluateArgs {
  std::string ckpt, corpus, split = "test", setting = "1", report;
  int excerpts = 20, attr_sets = 5, versions = 5, excerpt_bars = 16, window = 16;
  SamplingConfig sampling;
  SegmentExperimentConfig segment;
};

int run_evaluate(EvaluateArgs a) {
  KeyValues out;
  if (a.setting == "segment") {
    a.segment.seed = g_opts.seed;
    a.segment.lr.decay_steps = a.segment.decoder_steps;
    auto rep = run_segment_experiment(a.segment, ConditioningMode::InAttention, log_line);
    out.set("setting", std::string("segment"));
    out.set("val_nll.in_attention", rep.nll_conditioned);
    out.set("val_nll.unconditional", rep.nll_unconditional);
    out.set("recreate.sim_chr", rep.recreate_chr.mean);
    out.set("recreate.sim_grv", rep.recreate_grv.mean);
    out.set("random_pairs.sim_chr", rep.random_chr.mean);
    out.set("random_pairs.sim_grv", rep.random_grv.mean);
    out.set("seconds", rep.seconds);
  } else {
    if (a.ckpt.empty() || a.corpus.empty()) throw CLI::ValidationError("settings 1 and 2 need --ckpt and --corpus");
    CheckpointData data;
    StyleVae model = StyleVae::load(a.ckpt, nullptr, &data);
    Corpus corpus = load_corpus(a.corpus);
    if (corpus.sub_beats_per_bar != model.config().sub_beats_per_bar)
      throw ConfigError("corpus and checkpoint use different sub-beat grids");
    AttributeBins bins = get_bins(data.config, corpus.bins);
    corpus.bins = bins;
    reclassify(corpus);
    auto excerpts = select_excerpts(corpus, parse_split(a.split), a.excerpts, a.excerpt_bars, g_opts.seed);
    ControlProtocol proto;
    proto.attribute_sets = a.attr_sets;
    proto.window = a.window;
    proto.sampling = a.sampling;
    proto.seed = g_opts.seed;
    if (a.setting == "1") {
      auto rep = evaluate_control(model, excerpts, bins, proto);
      out.set("setting", 1);
      out.set("samples", rep.samples);
      out.set("bars", rep.bars);
      out.set("rho_rhym", rep.rho_rhym);
      out.set("rho_poly", rep.rho_poly);
      out.set("rho_poly_given_rhym", rep.rho_poly_given_rhym);
      out.set("rho_rhym_given_poly", rep.rho_rhym_given_poly);
      out.set("sim_chr.mean", rep.fidelity_chr.mean);
      out.set("sim_chr.std", rep.fidelity_chr.std);
      out.set("sim_grv.mean", rep.fidelity_grv.mean);
      out.set("sim_grv.std", rep.fidelity_grv.std);
      out.set("truncated_bars", rep.truncated_bars);
    } else if (a.setting == "2") {
      auto rep = evaluate_diversity(model, excerpts, a.versions, proto);
      out.set("setting", 2);
      out.set("pairs", rep.pairs);
      out.set("sim_chr.mean", rep.sim_chr.mean);
      out.set("sim_chr.std", rep.sim_chr.std);
      out.set("sim_grv.mean", rep.sim_grv.mean);
      out.set("sim_grv.std", rep.sim_grv.std);
    } else {
      throw CLI::ValidationError("--setting must be 1, 2 or segment");
    }
  }
  std::cout << out.to_text();
  if (!a.report.empty()) out.save(a.report);
  return 0;
}

// ---- serve -------------------------------------------------------------------------

struct ServeArgs {
  std::string host = "127.0.0.1", ckpt;
  int port = 8080;
  ServiceConfig cfg;
};

int run_serve(ServeArgs a) {
  a.cfg.sampling.seed = g_opts.seed;
  StyleService svc(a.cfg);
  if (!a.ckpt.empty()) {
    auto snap = svc.load_checkpoint(a.ckpt);
    log_line("loaded " + snap->path + " (step " + std::to_string(snap->step) + ")");
  }
  HttpFrontend http(svc);
  log_line("listening on http://" + a.host + ":" + std::to_string(a.port));
  if (!http.listen(a.host, a.port)) throw IoError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

const CLI::Validator kOverride(
    [](std::string& s) -> std::string {
      try {
        AttributeOverride::parse(s);
        return {};
      } catch (const std::invalid_argument& e) {
        return e.what();
      }
    },
    "+n|-n|=n", "override");

void sampling_flags(CLI::App* cmd, SamplingConfig& s) {
  cmd->add_option("--p", s.p, "Nucleus probability mass")->capture_default_str();
  cmd->add_option("--tau", s.tau, "Softmax temperature")->capture_default_str();
  cmd->add_option("--max-bar-tokens", s.max_bar_tokens, "Token cap per generated bar")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bar-level style transfer for symbolic piano music"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Read option defaults from a TOML/INI file");
  app.add_option("--seed", g_opts.seed, "Seed for every random choice")->capture_default_str();
  app.add_flag("-q,--quiet", g_opts.quiet, "Suppress progress logs on standard error");

  TokenizeArgs tok;
  auto* c_tok = app.add_subcommand("tokenize", "MIDI to event tokens, or back with --reverse");
  c_tok->add_option("input", tok.input, "Input .mid (or token file with --reverse)")->required()->check(CLI::ExistingFile);
  c_tok->add_option("-o,--output", tok.output, "Output file (stdout for tokens when omitted)");
  c_tok->add_flag("--reverse", tok.reverse, "Decode a token file into MIDI");
  c_tok->add_option("--sub-beats", tok.sub_beats, "Grid resolution per bar")->check(CLI::IsMember({16, 32}))->capture_default_str();

  AttrsArgs attrs;
  auto* c_attrs = app.add_subcommand("attrs", "Per-bar rhythmic intensity and polyphony table");
  c_attrs->add_option("input", attrs.input, "Input .mid or .tokens")->required()->check(CLI::ExistingFile);
  c_attrs->add_option("-o,--output", attrs.output, "CSV output (stdout when omitted)");
  c_attrs->add_option("--corpus", attrs.corpus, "Use this corpus's fitted class boundaries")->check(CLI::ExistingDirectory);
  c_attrs->add_option("--ckpt", attrs.ckpt, "Use the class boundaries stored in a checkpoint")->check(CLI::ExistingDirectory);
  c_attrs->add_option("--sub-beats", attrs.sub_beats, "Grid resolution per bar")->check(CLI::IsMember({16, 32}))->capture_default_str();

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-corpus", "Generate a synthetic corpus directory");
  c_synth->add_option("-o,--output", synth.output, "Corpus directory")->required();
  c_synth->add_option("--pieces", synth.pieces, "Number of pieces")->check(CLI::PositiveNumber)->capture_default_str();
  c_synth->add_option("--bars", synth.bars, "Bars per piece")->check(CLI::PositiveNumber)->capture_default_str();
  c_synth->add_option("--sub-beats", synth.sub_beats, "Grid resolution per bar")->check(CLI::IsMember({16, 32}))->capture_default_str();

  IngestArgs ing;
  auto* c_ing = app.add_subcommand("ingest", "Build a corpus directory from a folder of MIDI files");
  c_ing->add_option("input", ing.input, "Folder searched recursively for .mid/.midi")->required()->check(CLI::ExistingDirectory);
  c_ing->add_option("-o,--output", ing.output, "Corpus directory")->required();
  c_ing->add_option("--sub-beats", ing.sub_beats, "Grid resolution per bar")->check(CLI::IsMember({16, 32}))->capture_default_str();

  TrainArgs tr;
  tr.tc.crop_bars = 4;
  tr.tc.batch_size = 1;
  tr.tc.transpose = 6;
  tr.tc.lr = {1e-3, 200, 20000, 5e-5};
  tr.tc.kl = {1.0, 5000, 10000};
  auto* c_tr = app.add_subcommand("train", "Train the style-transfer model on a corpus");
  c_tr->add_option("--corpus", tr.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  c_tr->add_option("-o,--output", tr.output, "Checkpoint directory")->required();
  c_tr->add_option("--steps", tr.steps, "Total optimizer steps")->check(CLI::NonNegativeNumber)->capture_default_str();
  c_tr->add_flag("--resume", tr.resume, "Continue from the checkpoint in --output if present");
  c_tr->add_option("--save-every", tr.save_every, "Also checkpoint every N steps")->capture_default_str();
  c_tr->add_option("--log-every", tr.log_every, "Log averages every N steps")->check(CLI::PositiveNumber)->capture_default_str();
  c_tr->add_option("--log", tr.log_file, "Append the training log to this file");
  c_tr->add_option("--preset", tr.preset, "Model shape: toy or reference")->check(CLI::IsMember({"toy", "reference"}))->capture_default_str();
  c_tr->add_option("--layers", tr.layers, "Layers per stack");
  c_tr->add_option("--heads", tr.heads, "Attention heads");
  c_tr->add_option("--d-model", tr.d_model, "Hidden width");
  c_tr->add_option("--d-ff", tr.d_ff, "Feed-forward width");
  c_tr->add_option("--d-z", tr.d_z, "Latent width");
  c_tr->add_option("--d-attr", tr.d_attr, "Attribute embedding width");
  c_tr->add_option("--crop-bars", tr.tc.crop_bars, "Bars per training crop")->capture_default_str();
  c_tr->add_option("--max-tokens", tr.tc.max_tokens, "Token budget per crop")->capture_default_str();
  c_tr->add_option("--batch", tr.tc.batch_size, "Crops per step")->capture_default_str();
  c_tr->add_option("--transpose", tr.tc.transpose, "Random key shift range in semitones")->capture_default_str();
  c_tr->add_option("--lr", tr.tc.lr.peak, "Peak learning rate")->capture_default_str();
  c_tr->add_option("--warmup", tr.tc.lr.warmup_steps, "Warm-up steps")->capture_default_str();
  c_tr->add_option("--decay-steps", tr.tc.lr.decay_steps, "Cosine decay length")->capture_default_str();
  c_tr->add_option("--final-lr", tr.tc.lr.final_lr, "Learning rate after decay")->capture_default_str();
  c_tr->add_option("--beta-max", tr.tc.kl.beta_max, "Largest KL weight")->capture_default_str();
  c_tr->add_option("--kl-cycle", tr.tc.kl.cycle_length, "KL ramp cycle length")->capture_default_str();
  c_tr->add_option("--kl-free-steps", tr.tc.kl.kl_free_steps, "Steps trained without the KL term")->capture_default_str();
  c_tr->add_option("--free-bits", tr.tc.free_bits, "Per-dimension KL floor")->capture_default_str();
  c_tr->add_option("--clip-norm", tr.tc.clip_norm, "Gradient norm clip (0 = off)")->capture_default_str();

  TransferArgs tf;
  auto* c_tf = app.add_subcommand("transfer", "Regenerate a piece under new per-bar attributes");
  c_tf->add_option("input", tf.input, "Source .mid or .tokens")->required()->check(CLI::ExistingFile);
  c_tf->add_option("--ckpt", tf.ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  c_tf->add_option("-o,--output", tf.output, "Output .mid")->required();
  c_tf->add_option("--rhym", tf.rhym, "Rhythm override for every bar: +n, -n or =n")->check(kOverride);
  c_tf->add_option("--poly", tf.poly, "Polyphony override for every bar: +n, -n or =n")->check(kOverride);
  c_tf->add_option("--rhym-file", tf.rhym_file, "Per-bar rhythm overrides, one per line")->check(CLI::ExistingFile);
  c_tf->add_option("--poly-file", tf.poly_file, "Per-bar polyphony overrides, one per line")->check(CLI::ExistingFile);
  c_tf->add_option("--attrs-out", tf.attrs_out, "Write the achieved attribute table here");
  c_tf->add_option("--tokens-out", tf.tokens_out, "Write the generated tokens here");
  c_tf->add_option("--window", tf.window, "Bars per decoding window")->check(CLI::Range(2, 1 << 20))->capture_default_str();
  sampling_flags(c_tf, tf.sampling);

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Attribute-control (1), diversity (2) or conditioning (segment) report");
  c_ev->add_option("--setting", ev.setting, "1, 2 or segment")->check(CLI::IsMember({"1", "2", "segment"}))->capture_default_str();
  c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->check(CLI::ExistingDirectory);
  c_ev->add_option("--corpus", ev.corpus, "Corpus directory")->check(CLI::ExistingDirectory);
  c_ev->add_option("--split", ev.split, "Split the excerpts come from")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  c_ev->add_option("--excerpts", ev.excerpts, "Number of excerpts")->check(CLI::PositiveNumber)->capture_default_str();
  c_ev->add_option("--attr-sets", ev.attr_sets, "Random attribute sets per excerpt (setting 1)")->check(CLI::PositiveNumber)->capture_default_str();
  c_ev->add_option("--versions", ev.versions, "Generations per excerpt (setting 2)")->check(CLI::Range(2, 1000))->capture_default_str();
  c_ev->add_option("--excerpt-bars", ev.excerpt_bars, "Bars per excerpt")->check(CLI::PositiveNumber)->capture_default_str();
  c_ev->add_option("--window", ev.window, "Bars per decoding window")->check(CLI::Range(2, 1 << 20))->capture_default_str();
  c_ev->add_option("--report", ev.report, "Also write the report to this file");
  c_ev->add_option("--segment-steps", ev.segment.decoder_steps, "Decoder steps (segment setting)")->capture_default_str();
  c_ev->add_option("--extractor-steps", ev.segment.extractor_steps, "Extractor steps (segment setting)")->capture_default_str();
  sampling_flags(c_ev, ev.sampling);

  ServeArgs sv;
  auto* c_sv = app.add_subcommand("serve", "Run the HTTP service");
  c_sv->add_option("--host", sv.host, "Bind address")->envname("BARSTYLE_HOST")->capture_default_str();
  c_sv->add_option("--port", sv.port, "TCP port")->envname("BARSTYLE_PORT")->check(CLI::Range(1, 65535))->capture_default_str();
  c_sv->add_option("--ckpt", sv.ckpt, "Checkpoint to load at start")->envname("BARSTYLE_CHECKPOINT");
  c_sv->add_option("--workers", sv.cfg.workers, "Transfer worker threads")->envname("BARSTYLE_WORKERS")->check(CLI::PositiveNumber)->capture_default_str();
  c_sv->add_option("--store", sv.cfg.store_dir, "Record store directory")->envname("BARSTYLE_STORE")->capture_default_str();
  c_sv->add_option("--sub-beats", sv.cfg.sub_beats_per_bar, "Grid resolution per bar")->check(CLI::IsMember({16, 32}))->capture_default_str();
  c_sv->add_option("--window", sv.cfg.window, "Default bars per decoding window")->capture_default_str();
  sampling_flags(c_sv, sv.cfg.sampling);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "barstyle: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*c_tok) return run_tokenize(tok);
    if (*c_attrs) return run_attrs(attrs);
    if (*c_synth) return run_synth(synth);
    if (*c_ing) return run_ingest(ing);
    if (*c_tr) return run_train(tr);
    if (*c_tf) return run_transfer(tf);
    if (*c_ev) return run_evaluate(ev);
    if (*c_sv) return run_serve(sv);
  } catch (const CLI::Error& e) {
    std::cerr << "barstyle: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "barstyle: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
