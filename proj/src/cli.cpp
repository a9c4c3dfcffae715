#include "dmr/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "dmr/checkpoint.hpp"
#include "dmr/error.hpp"
#include "dmr/eval.hpp"
#include "dmr/training.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace dmr {

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string highlight_document(const Corpus& corpus, std::span<const Mask> predicted,
                               HighlightFormat format, std::size_t limit) {
  if (predicted.size() != corpus.size()) {
    throw ShapeError("highlight: " + std::to_string(predicted.size()) + " masks for " +
                     std::to_string(corpus.size()) + " examples");
  }
  const bool html = format == HighlightFormat::kHtml;
  std::ostringstream doc;
  if (html) {
    doc << "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>rationales</title></head>\n"
        << "<body>\n<p>bold: predicted rationale; underlined: gold rationale</p>\n";
  } else {
    doc << "\x1b[1mbold\x1b[0m: predicted rationale; \x1b[4munderlined\x1b[0m: gold rationale\n\n";
  }
  const std::size_t n = std::min(limit, corpus.size());
  for (std::size_t i = 0; i < n; ++i) {
    const Example& ex = corpus.examples[i];
    if (predicted[i].size() != ex.tokens.size()) {
      throw ShapeError("highlight: example " + std::to_string(i) + " has a mask of length " +
                       std::to_string(predicted[i].size()) + " for " +
                       std::to_string(ex.tokens.size()) + " tokens");
    }
    doc << (html ? "<p>" : "") << "[" << i << "] label " << ex.label << ":";
    for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
      const bool pred = predicted[i][t] != 0;
      const bool gold = ex.rationale && (*ex.rationale)[t] != 0;
      const std::string& word = corpus.vocab.decode(ex.tokens[t]);
      doc << ' ';
      if (html) {
        doc << (pred ? "<b>" : "") << (gold ? "<u>" : "") << html_escape(word)
            << (gold ? "</u>" : "") << (pred ? "</b>" : "");
      } else if (pred || gold) {
        doc << (pred ? "\x1b[1m" : "") << (gold ? "\x1b[4m" : "") << word << "\x1b[0m";
      } else {
        doc << word;
      }
    }
    doc << (html ? "</p>\n" : "\n");
  }
  if (html) doc << "</body>\n</html>\n";
  return doc.str();
}

namespace {

// ---- shared plumbing -------------------------------------------------------

fs::path default_out_dir() {
  const char* env = std::getenv(kOutputDirEnv);
  return env && *env ? fs::path(env) : fs::path(".");
}

fs::path or_default(const std::string& given, const fs::path& dir, const char* name) {
  return given.empty() ? dir / name : fs::path(given);
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ConfigError(what + " not found: " + p.string());
}

fs::path prepare_out_dir(const std::string& dir) {
  const fs::path p = dir.empty() ? default_out_dir() : fs::path(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw ConfigError("cannot create output directory " + p.string());
  return p;
}

void write_text(const fs::path& p, const std::string& text, bool append = false) {
  std::ofstream out(p, append ? std::ios::app | std::ios::binary : std::ios::binary);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << text;
}

std::string fmt(double v, int precision = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

// Applies `key=value` lines to options of `app` that were not given on the
// command line.
void apply_config_file(CLI::App& app, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + " line " + std::to_string(n) + ": expected key=value");
    }
    std::string key = CLI::detail::trim_copy(line.substr(0, eq));
    const std::string value = CLI::detail::trim_copy(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    CLI::Option* opt = key == "config" ? nullptr : app.get_option_no_throw("--" + key);
    if (!opt) {
      throw ConfigError(path + " line " + std::to_string(n) + ": unknown key '" + key + "'");
    }
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

struct Common {
  std::string config;
  std::string out_dir;

  void add(CLI::App& app) {
    app.add_option("--config", config, "key=value file with flag defaults");
    app.add_option("--out-dir", out_dir,
                   std::string("directory for default artifact paths (default $") + kOutputDirEnv +
                       " or .)");
  }
};

struct ClassifierFlags {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 100;
  std::string pooling = "max";

  void add(CLI::App& app) {
    app.add_option("--embed-dim", embed_dim, "classifier embedding size")->capture_default_str();
    app.add_option("--hidden-dim", hidden_dim, "classifier encoder size")->capture_default_str();
    app.add_option("--feature-dim", feature_dim, "sigmoid feature layer size")->capture_default_str();
    app.add_option("--pooling", pooling, "max|mean")->capture_default_str();
  }

  ClassifierConfig build(const Corpus& corpus) const {
    ClassifierConfig c;
    c.vocab_size = corpus.vocab.size();
    c.embed_dim = embed_dim;
    c.hidden_dim = hidden_dim;
    c.feature_dim = feature_dim;
    c.num_classes = corpus.num_classes();
    c.pooling = parse_pooling(pooling);
    return c;
  }
};

struct OptimFlags {
  std::size_t epochs;
  std::size_t batch_size;
  std::uint64_t seed = 1;
  std::string optimizer = "adam";
  double lr;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  bool record_time = false;

  OptimFlags(std::size_t e, std::size_t b, double l) : epochs(e), batch_size(b), lr(l) {}

  void add(CLI::App& app) {
    app.add_option("--epochs", epochs, "training epochs")->capture_default_str();
    app.add_option("--batch-size", batch_size, "examples per batch")->capture_default_str();
    app.add_option("--seed", seed, "random seed")->capture_default_str();
    app.add_option("--optimizer", optimizer, "sgd|adam")->capture_default_str();
    app.add_option("--lr", lr, "learning rate")->capture_default_str();
    app.add_option("--beta1", beta1, "Adam beta1")->capture_default_str();
    app.add_option("--beta2", beta2, "Adam beta2")->capture_default_str();
    app.add_option("--eps", eps, "Adam epsilon")->capture_default_str();
    app.add_flag("--record-time", record_time, "add wall-clock seconds to the epoch log");
  }

  void fill(TrainConfig& c) const {
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.seed = seed;
    c.optimizer.kind = parse_optimizer(optimizer);
    c.optimizer.learning_rate = lr;
    c.optimizer.beta1 = beta1;
    c.optimizer.beta2 = beta2;
    c.optimizer.epsilon = eps;
    c.record_time = record_time;
  }
};

Vocabulary load_vocab(const fs::path& p) {
  require_file(p, "vocabulary");
  return Vocabulary::load(p);
}

Corpus load_labeled(const fs::path& p, const Vocabulary& vocab) {
  require_file(p, "corpus");
  return load_corpus(p, &vocab);
}

Classifier load_teacher(const fs::path& p, const Vocabulary& vocab) {
  Classifier t = Classifier::load(read_checkpoint(p), "teacher");
  if (t.config().vocab_size != vocab.size()) {
    throw ConfigError("teacher checkpoint vocabulary size " + std::to_string(t.config().vocab_size) +
                      " does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
  }
  return t;
}

struct Model {
  Generator generator;
  Classifier classifier;
  LabelSource label_source;
};

Model load_model(const fs::path& p, const Vocabulary& vocab) {
  require_file(p, "model checkpoint");
  const Checkpoint ckpt = read_checkpoint(p);
  Model m{Generator::load(ckpt), Classifier::load(ckpt, "classifier"),
          parse_label_source(ckpt.meta_value("train.label_source"))};
  if (m.classifier.config().vocab_size != vocab.size()) {
    throw ConfigError("model vocabulary size " + std::to_string(m.classifier.config().vocab_size) +
                      " does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
  }
  return m;
}

void check_labels(const Corpus& corpus, int num_classes) {
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus.examples[i].label >= num_classes) {
      throw DataError("label " + std::to_string(corpus.examples[i].label) +
                      " outside the model's " + std::to_string(num_classes) + " classes",
                      i + 1);
    }
  }
}

// ---- gen-data --------------------------------------------------------------

struct GenData {
  Common common;
  std::size_t n = 2000, test_n = 500, vocab = 200, classes = 2, signals = 3, signal_set = 5;
  std::string len = "20..40", noise = "uniform";
  double zipf_exponent = 1.0;
  std::uint64_t seed = 7;
  std::string out, test_out, vocab_out;

  void add(CLI::App& app) {
    common.add(app);
    app.add_option("--n", n, "training examples")->capture_default_str();
    app.add_option("--test-n", test_n, "additional held-out examples (0: none)")->capture_default_str();
    app.add_option("--vocab", vocab, "vocabulary size (non-reserved tokens)")->capture_default_str();
    app.add_option("--len", len, "sequence length range MIN..MAX")->capture_default_str();
    app.add_option("--classes", classes, "number of classes")->capture_default_str();
    app.add_option("--signals", signals, "signal tokens per example")->capture_default_str();
    app.add_option("--signal-set", signal_set, "signal tokens owned by each class")->capture_default_str();
    app.add_option("--noise", noise, "neutral token distribution: uniform|zipf")->capture_default_str();
    app.add_option("--zipf-exponent", zipf_exponent, "exponent for zipf noise")->capture_default_str();
    app.add_option("--seed", seed, "random seed")->capture_default_str();
    app.add_option("--out", out, "corpus file (default <out-dir>/corpus.jsonl)");
    app.add_option("--test-out", test_out, "held-out corpus file (default <out-dir>/test.jsonl)");
    app.add_option("--vocab-out", vocab_out, "vocabulary file (default <out-dir>/vocab.txt)");
  }

  int run(std::ostream& os) {
    const fs::path dir = prepare_out_dir(common.out_dir);
    SynthConfig c;
    const auto dots = len.find("..");
    try {
      if (dots == std::string::npos) {
        c.min_length = c.max_length = std::stoul(len);
      } else {
        c.min_length = std::stoul(len.substr(0, dots));
        c.max_length = std::stoul(len.substr(dots + 2));
      }
    } catch (const std::exception&) {
      throw ConfigError("--len expects MIN..MAX, got '" + len + "'");
    }
    if (noise == "uniform") {
      c.noise = NoiseDistribution::kUniform;
    } else if (noise == "zipf") {
      c.noise = NoiseDistribution::kZipf;
    } else {
      throw ConfigError("--noise expects uniform|zipf, got '" + noise + "'");
    }
    if (n == 0) throw ConfigError("--n must be positive");
    c.vocab_size = vocab;
    c.num_examples = n + test_n;
    c.num_classes = static_cast<int>(classes);
    c.signals_per_example = signals;
    c.signal_set_size = signal_set;
    c.zipf_exponent = zipf_exponent;
    c.seed = seed;
    validate(c);
    Corpus all = generate_synthetic(c);
    Corpus train{{all.examples.begin(), all.examples.begin() + static_cast<std::ptrdiff_t>(n)},
                 all.vocab};
    const fs::path corpus_path = or_default(out, dir, "corpus.jsonl");
    const fs::path vocab_path = or_default(vocab_out, dir, "vocab.txt");
    save_corpus(corpus_path, train);
    all.vocab.save(vocab_path);
    summarize(os, "train", train, corpus_path);
    if (test_n > 0) {
      Corpus test{{all.examples.begin() + static_cast<std::ptrdiff_t>(n), all.examples.end()},
                  all.vocab};
      const fs::path test_path = or_default(test_out, dir, "test.jsonl");
      save_corpus(test_path, test);
      summarize(os, "test", test, test_path);
    }
    os << "vocabulary: " << all.vocab.size() << " ids -> " << vocab_path.string() << "\n";
    return 0;
  }

  static void summarize(std::ostream& os, const char* name, const Corpus& c, const fs::path& p) {
    std::size_t tokens = 0;
    for (const Example& e : c.examples) tokens += e.tokens.size();
    os << name << ": " << c.size() << " examples, " << c.num_classes() << " classes, mean length "
       << fmt(static_cast<double>(tokens) / static_cast<double>(c.size())) << " -> " << p.string()
       << "\n";
  }
};

// ---- train-teacher ---------------------------------------------------------

struct TrainTeacher {
  Common common;
  ClassifierFlags model;
  OptimFlags optim{5, 32, 1e-3};
  std::string corpus, vocab, teacher, report;

  void add(CLI::App& app) {
    common.add(app);
    app.add_option("--corpus", corpus, "training corpus (JSONL)")->required();
    app.add_option("--vocab", vocab, "vocabulary file (default <out-dir>/vocab.txt)");
    app.add_option("--teacher", teacher, "teacher checkpoint to write (default <out-dir>/teacher.ckpt)");
    app.add_option("--report", report, "epoch log (default <out-dir>/teacher_report.jsonl)");
    model.add(app);
    optim.add(app);
  }

  int run(std::ostream& os) {
    const fs::path dir = prepare_out_dir(common.out_dir);
    const Vocabulary v = load_vocab(or_default(vocab, dir, "vocab.txt"));
    const Corpus data = load_labeled(corpus, v);
    TrainConfig c;
    optim.fill(c);
    TeacherResult r = pretrain_teacher(data, model.build(data), c);
    for (const EpochRecord& e : r.report.epochs) {
      os << "teacher epoch " << e.epoch << ": l_cls " << fmt(e.cls, 4) << ", train accuracy "
         << fmt(*e.train_accuracy) << "\n";
    }
    Checkpoint ckpt;
    r.teacher.save(ckpt);
    ckpt.meta["train.seed"] = std::to_string(c.seed);
    const fs::path out = or_default(teacher, dir, "teacher.ckpt");
    write_checkpoint(out, ckpt);
    write_text(or_default(report, dir, "teacher_report.jsonl"), r.report.to_jsonl());
    os << "teacher checkpoint -> " << out.string() << "\n";
    return 0;
  }
};

// ---- train -----------------------------------------------------------------

struct Train {
  Common common;
  ClassifierFlags model;
  OptimFlags optim{20, 32, 1e-3};
  std::string corpus, vocab, teacher, test, out_model, report, results;
  std::size_t gen_embed_dim = 32, gen_hidden_dim = 32;
  bool class_conditioning = false, share_embedding = false;
  double threshold = 0.5;
  double lambda1 = 0.001, lambda2 = 0.0, lambda3 = 1.0, lambda4 = 1.0;
  int moment_order = 5;
  std::string matching = "cmd";
  double mmd_bandwidth = 1.0;
  std::string label_source = "none", mask_mode = "stochastic";
  std::optional<double> target_sparsity;
  std::string sweep;
  std::size_t workers = 1;
  CLI::Option* teacher_opt = nullptr;

  void add(CLI::App& app) {
    common.add(app);
    app.add_option("--corpus", corpus, "training corpus (JSONL)")->required();
    app.add_option("--vocab", vocab, "vocabulary file (default <out-dir>/vocab.txt)");
    teacher_opt = app.add_option("--teacher", teacher,
                                 "pretrained teacher checkpoint (default <out-dir>/teacher.ckpt)");
    app.add_option("--test", test, "held-out corpus evaluated after every epoch and at the end");
    app.add_option("--model", out_model, "checkpoint to write (default <out-dir>/model.ckpt)");
    app.add_option("--report", report, "epoch log (default <out-dir>/train_report.jsonl)");
    app.add_option("--results", results, "results file, one line per run (default <out-dir>/results.jsonl)");
    model.add(app);
    app.add_option("--gen-embed-dim", gen_embed_dim, "generator embedding size")->capture_default_str();
    app.add_option("--gen-hidden-dim", gen_hidden_dim, "generator encoder size")->capture_default_str();
    app.add_flag("--class-conditioning", class_conditioning, "condition the generator on a class label");
    app.add_flag("--share-embedding", share_embedding, "generator reads the classifier's embeddings");
    app.add_option("--threshold", threshold, "selection threshold for evaluation masks")->capture_default_str();
    app.add_option("--lambda1", lambda1, "sparsity weight")->capture_default_str();
    app.add_option("--lambda2", lambda2, "continuity weight")->capture_default_str();
    app.add_option("--lambda3", lambda3, "feature-space matching weight")->capture_default_str();
    app.add_option("--lambda4", lambda4, "output-space matching weight")->capture_default_str();
    app.add_option("--moment-order", moment_order, "highest CMD moment K")->capture_default_str();
    app.add_option("--matching", matching, "feature matching loss: cmd|mmd|coral")->capture_default_str();
    app.add_option("--mmd-bandwidth", mmd_bandwidth, "Gaussian kernel bandwidth for mmd")->capture_default_str();
    app.add_option("--label-source", label_source, "generator label: none|ground_truth|teacher")
        ->capture_default_str();
    app.add_option("--mask-mode", mask_mode, "training masks: stochastic|threshold")->capture_default_str();
    app.add_option("--target-sparsity", target_sparsity, "reported next to achieved sparsity, in (0,1)");
    app.add_option("--sweep", sweep, "KEY=V1,V2,... one run per value (lambda1-4, lr, seed, moment-order)");
    app.add_option("--workers", workers, "evaluation threads")->capture_default_str();
    optim.add(app);
  }

  TrainConfig train_config() const {
    TrainConfig c;
    optim.fill(c);
    c.weights.sparsity = lambda1;
    c.weights.continuity = lambda2;
    c.weights.feature_matching = lambda3;
    c.weights.output_matching = lambda4;
    c.weights.moment_order = moment_order;
    c.weights.matching = parse_matching_loss(matching);
    c.weights.mmd_bandwidth = mmd_bandwidth;
    c.label_source = parse_label_source(label_source);
    c.mask_mode = parse_mask_mode(mask_mode);
    c.target_sparsity = target_sparsity;
    return c;
  }

  GeneratorConfig generator_config(const Corpus& data) const {
    GeneratorConfig g;
    g.vocab_size = data.vocab.size();
    g.embed_dim = gen_embed_dim;
    g.hidden_dim = gen_hidden_dim;
    g.num_classes = data.num_classes();
    g.class_conditioning = class_conditioning;
    g.share_embedding = share_embedding;
    g.threshold = threshold;
    return g;
  }

  static void set_sweep_value(TrainConfig& c, const std::string& key, const std::string& value) {
    try {
      if (key == "lambda1") c.weights.sparsity = std::stod(value);
      else if (key == "lambda2") c.weights.continuity = std::stod(value);
      else if (key == "lambda3") c.weights.feature_matching = std::stod(value);
      else if (key == "lambda4") c.weights.output_matching = std::stod(value);
      else if (key == "lr") c.optimizer.learning_rate = std::stod(value);
      else if (key == "seed") c.seed = std::stoull(value);
      else if (key == "moment-order") c.weights.moment_order = std::stoi(value);
      else throw ConfigError("--sweep: unsupported key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("--sweep: bad value '" + value + "' for " + key);
    } catch (const std::out_of_range&) {
      throw ConfigError("--sweep: value out of range '" + value + "' for " + key);
    }
  }

  int run(std::ostream& os) {
    const fs::path dir = prepare_out_dir(common.out_dir);
    const Vocabulary v = load_vocab(or_default(vocab, dir, "vocab.txt"));
    const Corpus data = load_labeled(corpus, v);
    std::optional<Corpus> held_out;
    if (!test.empty()) held_out = load_labeled(test, v);

    const TrainConfig base = train_config();
    validate(base);
    const GeneratorConfig gen_config = generator_config(data);
    const ClassifierConfig clf_config = model.build(data);
    if (held_out) check_labels(*held_out, clf_config.num_classes);

    const bool needs_teacher = base.weights.output_matching > 0.0 ||
                               (class_conditioning && base.label_source == LabelSource::kTeacher);
    const fs::path teacher_path = or_default(teacher, dir, "teacher.ckpt");
    std::optional<Classifier> t;
    if (fs::is_regular_file(teacher_path)) {
      t = load_teacher(teacher_path, v);
    } else if (needs_teacher || teacher_opt->count() > 0) {
      throw ConfigError("teacher checkpoint not found: " + teacher_path.string() +
                        (needs_teacher ? " (required for lambda4 > 0 or teacher labels)" : ""));
    }

    // Sweep values; a plain run is a single unnamed value.
    std::string sweep_key;
    std::vector<std::string> values{""};
    if (!sweep.empty()) {
      const auto eq = sweep.find('=');
      if (eq == std::string::npos || eq + 1 == sweep.size()) {
        throw ConfigError("--sweep expects KEY=V1,V2,...");
      }
      sweep_key = sweep.substr(0, eq);
      values = CLI::detail::split(sweep.substr(eq + 1), ',');
      for (const std::string& value : values) {
        TrainConfig probe = base;
        set_sweep_value(probe, sweep_key, value);
        validate(probe);
      }
    }

    const fs::path results_path = or_default(results, dir, "results.jsonl");
    const Corpus& eval_corpus = held_out ? *held_out : data;
    EvalConfig ec;
    ec.label_source = class_conditioning ? base.label_source : LabelSource::kNone;
    ec.workers = workers;
    for (const std::string& value : values) {
      TrainConfig c = base;
      if (!sweep_key.empty()) set_sweep_value(c, sweep_key, value);
      JointResult r = train_joint(data, t ? &*t : nullptr, gen_config, clf_config, c,
                                  held_out ? &*held_out : nullptr);
      if (sweep_key.empty()) {
        for (const EpochRecord& e : r.report.epochs) print_epoch(os, e);
        Checkpoint ckpt;
        r.generator.save(ckpt);
        r.classifier.save(ckpt);
        ckpt.meta["train.label_source"] = to_string(ec.label_source);
        ckpt.meta["train.seed"] = std::to_string(c.seed);
        const fs::path model_path = or_default(out_model, dir, "model.ckpt");
        write_checkpoint(model_path, ckpt);
        write_text(or_default(report, dir, "train_report.jsonl"), r.report.to_jsonl());
        os << "model checkpoint -> " << model_path.string() << "\n";
      }
      const EvalResult res = evaluate_run(r.generator, r.classifier, t ? &*t : nullptr,
                                          eval_corpus, ec);
      ordered_json line;
      if (!sweep_key.empty()) {
        line["sweep"] = sweep_key;
        line["value"] = value;
      }
      line["seed"] = c.seed;
      line["lambda1"] = c.weights.sparsity;
      line["lambda2"] = c.weights.continuity;
      line["lambda3"] = c.weights.feature_matching;
      line["lambda4"] = c.weights.output_matching;
      line["matching"] = to_string(c.weights.matching);
      line["eval_corpus"] = held_out ? "test" : "train";
      line["result"] = res.to_json();
      os << line.dump() << "\n";
      write_text(results_path, line.dump() + "\n", true);
    }
    return 0;
  }

  static void print_epoch(std::ostream& os, const EpochRecord& e) {
    os << "epoch " << e.epoch << ": l_cls " << fmt(e.cls, 4);
    if (e.omega) os << ", omega " << fmt(*e.omega, 4);
    if (e.fm) os << ", l_fm " << fmt(*e.fm, 4);
    if (e.om) os << ", l_om " << fmt(*e.om, 4);
    if (e.sparsity) os << ", sparsity " << fmt(*e.sparsity);
    if (e.validation && e.validation->metrics) os << ", test F1 " << fmt(e.validation->metrics->f1);
    if (e.validation) os << ", test accuracy " << fmt(e.validation->accuracy_rationale);
    os << "\n";
  }
};

// ---- eval / highlight ------------------------------------------------------

struct Inference {
  std::string corpus, vocab, model, teacher, label_source;

  void add(CLI::App& app) {
    app.add_option("--corpus", corpus, "corpus to evaluate (JSONL)")->required();
    app.add_option("--vocab", vocab, "vocabulary file (default <out-dir>/vocab.txt)");
    app.add_option("--model", model, "trained checkpoint (default <out-dir>/model.ckpt)");
    app.add_option("--teacher", teacher, "teacher checkpoint for teacher labels (default <out-dir>/teacher.ckpt)");
    app.add_option("--label-source", label_source,
                   "generator label: none|ground_truth|teacher (default: as trained)");
  }

  struct Loaded {
    Corpus corpus;
    Model model;
    std::optional<Classifier> teacher;
    EvalConfig config;
  };

  Loaded load(const fs::path& dir) const {
    const Vocabulary v = load_vocab(or_default(vocab, dir, "vocab.txt"));
    Model m = load_model(or_default(model, dir, "model.ckpt"), v);
    Loaded l{load_labeled(corpus, v), std::move(m), std::nullopt, {}};
    check_labels(l.corpus, l.model.classifier.config().num_classes);
    l.config.label_source =
        label_source.empty() ? l.model.label_source : parse_label_source(label_source);
    if (!l.model.generator.config().class_conditioning) l.config.label_source = LabelSource::kNone;
    if (l.model.generator.config().class_conditioning &&
        l.config.label_source == LabelSource::kNone) {
      throw ConfigError("the generator is class-conditioned; pass --label-source");
    }
    if (l.config.label_source == LabelSource::kTeacher) {
      const fs::path tp = or_default(teacher, dir, "teacher.ckpt");
      require_file(tp, "teacher checkpoint");
      l.teacher = load_teacher(tp, v);
    }
    return l;
  }
};

struct Eval {
  Common common;
  Inference inputs;
  bool json = false;
  std::string masks, results;
  std::size_t workers = 1, batch_size = 256;

  void add(CLI::App& app) {
    common.add(app);
    inputs.add(app);
    app.add_flag("--json", json, "print one machine-readable JSON record");
    app.add_option("--masks", masks, "predicted mask dump (default <out-dir>/masks.jsonl)");
    app.add_option("--results", results, "also append the JSON record to this file");
    app.add_option("--workers", workers, "evaluation threads")->capture_default_str();
    app.add_option("--batch-size", batch_size, "evaluation batch size")->capture_default_str();
  }

  int run(std::ostream& os) {
    const fs::path dir = prepare_out_dir(common.out_dir);
    Inference::Loaded l = inputs.load(dir);
    if (l.corpus.empty()) throw ConfigError("corpus is empty: " + inputs.corpus);
    l.config.workers = workers;
    l.config.batch_size = batch_size;
    const EvalResult r = evaluate_run(l.model.generator, l.model.classifier,
                                      l.teacher ? &*l.teacher : nullptr, l.corpus, l.config);
    std::string dump;
    for (std::size_t i = 0; i < r.masks.size(); ++i) {
      ordered_json j;
      j["index"] = i;
      j["mask"] = r.masks[i];
      dump += j.dump() + "\n";
    }
    const fs::path mask_path = or_default(masks, dir, "masks.jsonl");
    write_text(mask_path, dump);

    ordered_json record;
    record["corpus"] = inputs.corpus;
    record["examples"] = l.corpus.size();
    record["label_source"] = to_string(l.config.label_source);
    const ordered_json summary = r.to_json();
    for (const auto& [k, val] : summary.items()) record[k] = val;
    if (!results.empty()) write_text(results, record.dump() + "\n", true);
    if (json) {
      os << record.dump() << "\n";
      return 0;
    }
    os << "examples: " << l.corpus.size() << "\n";
    os << "sparsity: " << fmt(r.sparsity) << "\n";
    if (r.metrics) {
      os << "precision: " << fmt(r.metrics->precision) << "\n"
         << "recall: " << fmt(r.metrics->recall) << "\n"
         << "f1: " << fmt(r.metrics->f1) << "\n";
    } else {
      os << "metrics: n/a (no gold rationales)\n";
    }
    os << "accuracy (rationales): " << fmt(r.accuracy_rationale) << "\n"
       << "accuracy (full text): " << fmt(r.accuracy_full) << "\n"
       << "masks -> " << mask_path.string() << "\n";
    return 0;
  }
};

struct Highlight {
  Common common;
  Inference inputs;
  std::string format = "html", out;
  std::size_t limit = 20;

  void add(CLI::App& app) {
    common.add(app);
    inputs.add(app);
    app.add_option("--format", format, "html|ansi")->capture_default_str();
    app.add_option("--out", out, "report file (default <out-dir>/highlight.html or .txt)");
    app.add_option("--limit", limit, "examples to render")->capture_default_str();
  }

  int run(std::ostream& os) {
    HighlightFormat f;
    if (format == "html") f = HighlightFormat::kHtml;
    else if (format == "ansi") f = HighlightFormat::kAnsi;
    else throw ConfigError("--format expects html|ansi, got '" + format + "'");
    const fs::path dir = prepare_out_dir(common.out_dir);
    const Inference::Loaded l = inputs.load(dir);
    // Only the rendered prefix needs masks.
    Corpus shown{{l.corpus.examples.begin(),
                  l.corpus.examples.begin() +
                      static_cast<std::ptrdiff_t>(std::min(limit, l.corpus.size()))},
                 l.corpus.vocab};
    std::vector<Mask> masks;
    for (const auto& idx : sequential_batch_indices(shown.size(), 256)) {
      const Batch b = make_batch(shown, idx);
      const auto cond = condition_labels(b, l.config.label_source, l.teacher ? &*l.teacher : nullptr);
      for (Mask& m : l.model.generator.infer_masks(
               b, cond,
               l.model.generator.config().share_embedding ? &l.model.classifier.params() : nullptr)) {
        masks.push_back(std::move(m));
      }
    }
    const fs::path path = or_default(out, dir, f == HighlightFormat::kHtml ? "highlight.html"
                                                                          : "highlight.txt");
    write_text(path, highlight_document(shown, masks, f, limit));
    os << "highlighted " << shown.size() << " examples -> " << path.string() << "\n";
    return 0;
  }
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Selective rationalization with distribution matching"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  GenData gen_data;
  TrainTeacher train_teacher;
  Train train;
  Eval eval;
  Highlight highlight;
  struct Entry {
    CLI::App* app;
    std::function<int()> run;
  };
  std::vector<Entry> entries;
  auto add = [&](const char* name, const char* help, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, help);
    cmd.add(*sub);
    entries.push_back({sub, [&cmd, &out] { return cmd.run(out); }});
  };
  add("gen-data", "write a synthetic corpus with planted rationales", gen_data);
  add("train-teacher", "pretrain the teacher classifier on full text", train_teacher);
  add("train", "jointly train generator and student classifier", train);
  add("eval", "score rationales and classification accuracy", eval);
  add("highlight", "render predicted and gold rationales", highlight);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }
  try {
    for (Entry& e : entries) {
      if (!e.app->parsed()) continue;
      auto* cfg = e.app->get_option("--config");
      apply_config_file(*e.app, cfg->empty() ? std::string() : cfg->as<std::string>());
      return e.run();
    }
    return 2;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace dmr
