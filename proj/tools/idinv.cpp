#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "idinv/checkpoint.hpp"
#include "idinv/service.hpp"

using namespace idinv;
namespace fs = std::filesystem;
using workspace::json;

namespace {

struct Common {
  std::uint64_t seed = 1;
  std::string out;
  std::string config;
  std::string home;
};

struct InversionFlags {
  std::optional<double> lambda_vgg, lambda_dom, step_size;
  std::optional<std::string> init;
  std::optional<int> steps;

  void add(CLI::App* app) {
    app->add_option("--lambda-vgg", lambda_vgg, "perceptual weight (default 5e-5)");
    app->add_option("--lambda-dom", lambda_dom, "domain regularizer weight (default 2)");
    app->add_option("--init", init, "encoder | random")->check(CLI::IsMember({"encoder", "random"}));
    app->add_option("--steps", steps, "optimization steps (default 200)");
    app->add_option("--step-size", step_size, "optimizer step size (default 0.01)");
  }

  inversion::InversionConfig resolve(inversion::InversionConfig c, std::uint64_t seed) const {
    if (lambda_vgg) c.lambda_vgg = *lambda_vgg;
    if (lambda_dom) c.lambda_dom = *lambda_dom;
    if (init) c.init = workspace::parse_init_mode(*init);
    if (steps) c.steps = *steps;
    if (step_size) c.step_size = *step_size;
    c.seed = seed;
    c.validate();
    return c;
  }
};

workspace::ExperimentConfig experiment(const Common& c) {
  return c.config.empty() ? workspace::ExperimentConfig{} : workspace::load_experiment_config(c.config);
}

fs::path home(const Common& c) { return c.home.empty() ? frontends::workspace_home() : fs::path(c.home); }

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw Error(ErrorKind::kInvalidArgument, "--out is required");
  return c.out;
}

workspace::Dataset dataset(const std::string& folder, const workspace::ExperimentConfig& cfg, std::uint64_t seed) {
  if (!folder.empty()) return workspace::load_image_folder(folder);
  auto spec = cfg.dataset;
  spec.seed = seed;
  return workspace::load_dataset(spec);
}

workspace::Checkpoint load(const std::string& ref, const Common& c) {
  return workspace::load_checkpoint(frontends::resolve_checkpoint(ref, home(c)));
}

std::shared_ptr<const frontends::ModelBundle> bundle(const std::string& ref, const Common& c) {
  return frontends::load_bundle(frontends::resolve_checkpoint(ref, home(c)), ref);
}

fs::path metrics_path(const fs::path& out) { return fs::path(out.string() + ".metrics.jsonl"); }

std::vector<int> parse_ints(const std::string& text, std::size_t count, const std::string& flag) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorKind::kInvalidArgument, flag + ": '" + item + "' is not an integer");
    }
  }
  if (out.size() != count) throw Error(ErrorKind::kInvalidArgument, flag + ": expected " + std::to_string(count) + " integers");
  return out;
}

std::optional<editing::LayerRange> layer_range(const std::string& text) {
  if (text.empty()) return std::nullopt;
  const auto v = parse_ints(text, 2, "--layers");
  return editing::LayerRange{v[0], v[1]};
}

std::string frame_name(const std::string& stem, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%03zu.png", i);
  return stem + buf;
}

void write_result(const fs::path& dir, const std::string& stem, const inversion::InversionResult<float>& r) {
  workspace::write_png(r.reconstruction, dir / (stem + ".png"));
  workspace::write_text(dir / (stem + ".trace.jsonl"), workspace::trace_jsonl(r.trace));
  json j = {{"code", workspace::to_json(r.code)},
            {"init_code", workspace::to_json(r.init_code)},
            {"initial", workspace::to_json(r.initial)},
            {"final", workspace::to_json(r.final)},
            {"steps_used", r.steps_used}};
  workspace::write_text(dir / (stem + ".json"), j.dump(2) + "\n");
}

// An argument naming a .json file is read as a code; anything else is an image to invert.
LatentCode<float> code_for(const frontends::ModelBundle& m, const std::string& arg, const inversion::InversionConfig& cfg,
                           const fs::path& out, const std::string& stem) {
  if (fs::path(arg).extension() == ".json") {
    auto j = workspace::read_json(arg);
    return workspace::parse_code(j.contains("code") ? j.at("code") : j, arg);
  }
  auto r = inversion::invert(m.g, m.e, m.f, workspace::read_png(arg), cfg);
  write_result(out, stem, r);
  return r.code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"idinv: in-domain GAN inversion and editing"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "seed for every random choice")->capture_default_str();
  app.add_option("--out", common.out, "output path");
  app.add_option("--config", common.config, "experiment configuration (JSON)");
  app.add_option("--home", common.home, "workspace root (default $IDINV_HOME)");

  // make-data
  auto* make = app.add_subcommand("make-data", "render the synthetic attribute dataset to a PNG folder");
  std::optional<int> make_count, make_res;
  make->add_option("--count", make_count, "number of images");
  make->add_option("--resolution", make_res, "image side");

  // train-gan
  auto* gan = app.add_subcommand("train-gan", "pre-train the generator and discriminator");
  std::string gan_data;
  std::optional<int> gan_steps, gan_batch;
  gan->add_option("--data", gan_data, "image folder (default: synthetic per config)");
  gan->add_option("--steps", gan_steps);
  gan->add_option("--batch", gan_batch);

  // train-features
  auto* feat = app.add_subcommand("train-features", "train the attribute classifier behind the perceptual features");
  std::string feat_data;
  std::optional<int> feat_steps;
  feat->add_option("--data", feat_data, "labelled image folder (default: synthetic per config)");
  feat->add_option("--steps", feat_steps);

  // train-encoder
  auto* enc = app.add_subcommand("train-encoder", "train an encoder against a frozen generator");
  std::string enc_mode = "domain-guided", enc_gan, enc_feat, enc_data;
  std::optional<int> enc_steps, enc_batch;
  std::optional<double> enc_lr;
  enc->add_option("--mode", enc_mode)->check(CLI::IsMember({"domain-guided", "conventional"}))->capture_default_str();
  enc->add_option("--gan", enc_gan, "checkpoint with the generator (and discriminator)")->required();
  enc->add_option("--features", enc_feat, "checkpoint with the feature extractor")->required();
  enc->add_option("--data", enc_data, "image folder (default: synthetic per config)");
  enc->add_option("--steps", enc_steps);
  enc->add_option("--batch", enc_batch);
  enc->add_option("--lr", enc_lr, "encoder and discriminator learning rate");

  // invert
  auto* inv = app.add_subcommand("invert", "invert images into the generator's code space");
  std::string inv_ckpt;
  std::vector<std::string> inv_images;
  InversionFlags inv_flags;
  inv->add_option("--checkpoint", inv_ckpt, "checkpoint id or directory")->required();
  inv->add_option("--image,images", inv_images, "PNG files")->required();
  inv_flags.add(inv);

  // edit
  auto* edit = app.add_subcommand("edit", "move an inverted code along a semantic boundary");
  std::string edit_ckpt, edit_input, edit_boundary, edit_layers, edit_bfile;
  std::vector<double> edit_alphas{-3, -1, 0, 1, 3};
  InversionFlags edit_flags;
  edit->add_option("--checkpoint", edit_ckpt)->required();
  edit->add_option("--image", edit_input, "PNG to invert, or a .json code")->required();
  edit->add_option("--boundary", edit_boundary, "attribute name")->required();
  edit->add_option("--alpha", edit_alphas, "steps along the normal")->delimiter(',')->capture_default_str();
  edit->add_option("--layers", edit_layers, "begin,end rows to shift (default all)");
  edit->add_option("--boundaries", edit_bfile, "boundaries.json (default: next to the checkpoint)");
  edit_flags.add(edit);

  // interpolate
  auto* interp = app.add_subcommand("interpolate", "linear interpolation between two inverted codes");
  std::string interp_ckpt, interp_a, interp_b;
  int interp_frames = 8;
  InversionFlags interp_flags;
  interp->add_option("--checkpoint", interp_ckpt)->required();
  interp->add_option("--a", interp_a, "first PNG or .json code")->required();
  interp->add_option("--b", interp_b, "second PNG or .json code")->required();
  interp->add_option("--frames", interp_frames)->capture_default_str();
  interp_flags.add(interp);

  // mix
  auto* mixc = app.add_subcommand("mix", "style mixing of two inverted codes");
  std::string mix_ckpt, mix_content, mix_style, mix_layers;
  InversionFlags mix_flags;
  mixc->add_option("--checkpoint", mix_ckpt)->required();
  mixc->add_option("--content", mix_content)->required();
  mixc->add_option("--style", mix_style)->required();
  mixc->add_option("--layers", mix_layers, "begin,end rows taken from the style (default last four)");
  mix_flags.add(mixc);

  // diffuse
  auto* diff = app.add_subcommand("diffuse", "paste a crop of the target into the context and diffuse it");
  std::string diff_ckpt, diff_target, diff_context, diff_crop, diff_paste;
  int diff_feather = 0;
  InversionFlags diff_flags;
  diff->add_option("--checkpoint", diff_ckpt)->required();
  diff->add_option("--target", diff_target)->required();
  diff->add_option("--context", diff_context)->required();
  diff->add_option("--crop", diff_crop, "top,left,height,width on the target")->required();
  diff->add_option("--paste", diff_paste, "top,left on the context (default: crop position)");
  diff->add_option("--feather", diff_feather)->capture_default_str();
  diff_flags.add(diff);

  // probe
  auto* probe = app.add_subcommand("probe", "fit semantic boundaries and score inverters against them");
  std::string probe_ckpt, probe_data, probe_conv;
  std::optional<int> probe_samples;
  int probe_count = 200;
  bool probe_install = false;
  InversionFlags probe_flags;
  probe->add_option("--checkpoint", probe_ckpt)->required();
  probe->add_option("--data", probe_data, "labelled image folder (default: synthetic per config)");
  probe->add_option("--samples", probe_samples, "generator samples for boundary fitting");
  probe->add_option("--count", probe_count, "images to invert")->capture_default_str();
  probe->add_option("--conventional", probe_conv, "checkpoint with a conventional encoder to score as well");
  probe->add_flag("--install", probe_install, "also write boundaries.json next to the checkpoint");
  probe_flags.add(probe);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "compare two image folders");
  std::string eval_a, eval_b, eval_metric = "all", eval_ckpt;
  eval->add_option("--a", eval_a, "originals")->required();
  eval->add_option("--b", eval_b, "reconstructions")->required();
  eval->add_option("--metric", eval_metric)->check(CLI::IsMember({"mse", "swd", "ffd", "all"}))->capture_default_str();
  eval->add_option("--checkpoint", eval_ckpt, "feature extractor for ffd");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP/JSON service over a checkpoint");
  std::string serve_host = "127.0.0.1", serve_ckpt = "default";
  int serve_port = 8080, serve_cap = 200;
  serve->add_option("--host", serve_host)->capture_default_str();
  serve->add_option("--port", serve_port)->capture_default_str();
  serve->add_option("--checkpoint", serve_ckpt, "default checkpoint id")->capture_default_str();
  serve->add_option("--step-cap", serve_cap)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << app.help();
    return 2;
  }

  try {
    const auto cfg = experiment(common);

    if (*make) {
      auto spec = cfg.dataset;
      IDINV_REQUIRE(spec.kind == workspace::DatasetKind::kSynthetic, "make-data renders the synthetic dataset");
      if (make_count) spec.synthetic.count = *make_count;
      if (make_res) spec.synthetic.resolution = *make_res;
      const auto data = workspace::make_synthetic_dataset(spec.synthetic, common.seed);
      workspace::save_image_folder(data, require_out(common));
      std::cout << "wrote " << data.size() << " images to " << common.out << "\n";
    } else if (*gan) {
      const auto out = require_out(common);
      auto gc = cfg.gan;
      gc.seed = common.seed;
      if (gan_steps) gc.steps = *gan_steps;
      if (gan_batch) gc.batch_size = *gan_batch;
      const auto data = dataset(gan_data, cfg, common.seed);
      workspace::MetricsLog log(metrics_path(out));
      auto r = training::train_gan(data, cfg.generator, gc, log.sink());
      workspace::Checkpoint ck;
      ck.generator = std::move(r.generator);
      ck.discriminator = std::move(r.discriminator);
      ck.metadata = {{"stage", "gan"}, {"gan", workspace::to_json(gc)}, {"images", data.size()}};
      workspace::save_checkpoint(ck, out);
      std::cout << "saved " << out.string() << "\n";
    } else if (*feat) {
      const auto out = require_out(common);
      auto fc = cfg.feature_training;
      fc.seed = common.seed;
      if (feat_steps) fc.steps = *feat_steps;
      const auto data = dataset(feat_data, cfg, common.seed);
      workspace::MetricsLog log(metrics_path(out));
      auto r = training::train_feature_extractor(data, cfg.features, fc, log.sink());
      workspace::Checkpoint ck;
      ck.features = std::move(r.extractor);
      ck.metadata = {{"stage", "features"},
                     {"feature_training", workspace::to_json(fc)},
                     {"held_out_accuracy", r.held_out_accuracy},
                     {"per_attribute_accuracy", r.per_attribute_accuracy}};
      workspace::save_checkpoint(ck, out);
      std::cout << "held-out accuracy " << r.held_out_accuracy << "; saved " << out.string() << "\n";
    } else if (*enc) {
      const auto out = require_out(common);
      auto tc = cfg.encoder;
      tc.seed = common.seed;
      if (enc_steps) tc.steps = *enc_steps;
      if (enc_batch) tc.batch_size = *enc_batch;
      if (enc_lr) tc.lr_encoder = tc.lr_discriminator = *enc_lr;
      auto g = load(enc_gan, common);
      auto f = load(enc_feat, common);
      if (!g.generator) throw Error(ErrorKind::kInvalidArgument, enc_gan + " has no generator");
      if (!f.features) throw Error(ErrorKind::kInvalidArgument, enc_feat + " has no feature extractor");
      workspace::MetricsLog log(metrics_path(out));
      workspace::Checkpoint ck;
      if (enc_mode == "domain-guided") {
        if (!g.discriminator) throw Error(ErrorKind::kInvalidArgument, enc_gan + " has no discriminator");
        auto r = training::train_domain_guided_encoder(*g.generator, *g.discriminator, *f.features,
                                                       dataset(enc_data, cfg, common.seed), tc, log.sink());
        ck.encoder = std::move(r.encoder);
        ck.discriminator = std::move(r.discriminator);
      } else {
        ck.encoder = training::train_conventional_encoder(*g.generator, tc, log.sink());
      }
      ck.generator = std::move(g.generator);
      ck.features = std::move(f.features);
      ck.metadata = {{"stage", "encoder"}, {"mode", enc_mode}, {"encoder", workspace::to_json(tc)}};
      workspace::save_checkpoint(ck, out);
      std::cout << "saved " << out.string() << "\n";
    } else if (*inv) {
      const auto out = require_out(common);
      const auto m = bundle(inv_ckpt, common);
      const auto ic = inv_flags.resolve(cfg.inversion, common.seed);
      std::vector<Image<float>> xs;
      for (const auto& p : inv_images) xs.push_back(workspace::read_png(p));
      const auto rs = inversion::invert(m->g, m->e, m->f, xs, ic);
      fs::create_directories(out);
      json summary = json::array();
      for (std::size_t i = 0; i < rs.size(); ++i) {
        const std::string stem = fs::path(inv_images[i]).stem().string();
        write_result(out, stem, rs[i]);
        summary.push_back({{"image", inv_images[i]}, {"final", workspace::to_json(rs[i].final)}, {"mse", mse(xs[i], rs[i].reconstruction)}});
      }
      workspace::write_text(out / "summary.json", json{{"inversion", workspace::to_json(ic)}, {"results", summary}}.dump(2) + "\n");
      std::cout << "inverted " << rs.size() << " images into " << out.string() << "\n";
    } else if (*edit) {
      const auto out = require_out(common);
      fs::create_directories(out);
      const auto m = bundle(edit_ckpt, common);
      const auto ic = edit_flags.resolve(cfg.inversion, common.seed);
      const auto boundaries = edit_bfile.empty() ? m->boundaries : workspace::load_boundaries(edit_bfile);
      const evaluation::SemanticBoundary* b = nullptr;
      for (const auto& x : boundaries)
        if (x.attribute == edit_boundary) b = &x;
      if (!b) throw Error(ErrorKind::kNotFound, "no boundary named '" + edit_boundary + "'");
      const auto code = code_for(*m, edit_input, ic, out, "source");
      for (std::size_t i = 0; i < edit_alphas.size(); ++i) {
        const editing::EditSpec spec{*b, edit_alphas[i], layer_range(edit_layers)};
        workspace::write_png(editing::manipulate(m->g, code, spec), out / frame_name("edit", i));
      }
      workspace::write_text(out / "edit.json", json{{"boundary", edit_boundary}, {"alphas", edit_alphas}}.dump(2) + "\n");
      std::cout << "wrote " << edit_alphas.size() << " edits to " << out.string() << "\n";
    } else if (*interp) {
      const auto out = require_out(common);
      fs::create_directories(out);
      const auto m = bundle(interp_ckpt, common);
      const auto ic = interp_flags.resolve(cfg.inversion, common.seed);
      const auto a = code_for(*m, interp_a, ic, out, "a");
      const auto b = code_for(*m, interp_b, ic, out, "b");
      const auto frames = editing::interpolation_sweep(m->g, a, b, interp_frames);
      for (std::size_t i = 0; i < frames.size(); ++i) workspace::write_png(frames[i], out / frame_name("frame", i));
      std::cout << "wrote " << frames.size() << " frames to " << out.string() << "\n";
    } else if (*mixc) {
      const auto out = require_out(common);
      fs::create_directories(out);
      const auto m = bundle(mix_ckpt, common);
      const auto ic = mix_flags.resolve(cfg.inversion, common.seed);
      const auto c = code_for(*m, mix_content, ic, out, "content");
      const auto s = code_for(*m, mix_style, ic, out, "style");
      workspace::write_png(editing::style_mix(m->g, c, s, layer_range(mix_layers)), out / "mix.png");
      std::cout << "wrote " << (out / "mix.png").string() << "\n";
    } else if (*diff) {
      const auto out = require_out(common);
      fs::create_directories(out);
      const auto m = bundle(diff_ckpt, common);
      const auto ic = diff_flags.resolve(cfg.inversion, common.seed);
      editing::DiffusionSpec spec;
      const auto crop = parse_ints(diff_crop, 4, "--crop");
      spec.crop = {crop[0], crop[1], crop[2], crop[3]};
      const auto paste = diff_paste.empty() ? std::vector<int>{crop[0], crop[1]} : parse_ints(diff_paste, 2, "--paste");
      spec.paste_top = paste[0];
      spec.paste_left = paste[1];
      spec.feather = diff_feather;
      spec.lambda_vgg = ic.lambda_vgg;
      spec.lambda_dom = ic.lambda_dom;
      spec.steps = ic.steps;
      spec.step_size = ic.step_size;
      const auto target = workspace::read_png(diff_target);
      const auto context = workspace::read_png(diff_context);
      workspace::write_png(editing::stitch(target, context, spec), out / "stitched.png");
      write_result(out, "diffused", editing::semantic_diffuse(m->g, m->e, m->f, target, context, spec));
      std::cout << "wrote " << (out / "diffused.png").string() << "\n";
    } else if (*probe) {
      const auto out = require_out(common);
      fs::create_directories(out);
      const auto m = bundle(probe_ckpt, common);
      const auto ic = probe_flags.resolve(cfg.inversion, common.seed);
      auto pc = cfg.probe;
      pc.seed = common.seed;
      if (probe_samples) pc.boundary_samples = *probe_samples;
      auto data = dataset(probe_data, cfg, common.seed);
      IDINV_REQUIRE(data.labeled(), "probe needs labelled images");
      if (data.size() > static_cast<std::size_t>(probe_count)) data = data.split(static_cast<std::size_t>(probe_count)).first;
      std::vector<evaluation::Inverter> inverters;
      inverters.push_back({"in-domain", [&](const std::vector<Image<float>>& xs) {
                             std::vector<LatentCode<float>> codes;
                             for (auto& r : inversion::invert(m->g, m->e, m->f, xs, ic)) codes.push_back(r.code);
                             return codes;
                           }});
      inverters.push_back({"encoder", [&](const std::vector<Image<float>>& xs) { return training::encode(m->e, xs); }});
      auto pixel = inversion::InversionConfig::pixel_only(ic.steps, common.seed);
      inverters.push_back({"mse-only", [&](const std::vector<Image<float>>& xs) {
                             std::vector<LatentCode<float>> codes;
                             for (auto& r : inversion::invert(m->g, m->e, m->f, xs, pixel)) codes.push_back(r.code);
                             return codes;
                           }});
      std::optional<training::EncoderModel<float>> conv;
      if (!probe_conv.empty()) {
        auto ck = load(probe_conv, common);
        if (!ck.encoder) throw Error(ErrorKind::kInvalidArgument, probe_conv + " has no encoder");
        conv = std::move(ck.encoder);
        inverters.push_back({"conventional", [&](const std::vector<Image<float>>& xs) { return training::encode(*conv, xs); }});
      }
      const auto result = evaluation::semantic_probe_experiment(m->g, m->f, inverters, data, pc);
      workspace::save_boundaries(result.boundaries, out / "boundaries.json");
      workspace::write_text(out / "probe.json", workspace::to_json(result).dump(2) + "\n");
      workspace::write_text(out / "pr_curves.csv", workspace::pr_curves_csv(result));
      if (probe_install) workspace::save_boundaries(result.boundaries, m->dir / "boundaries.json");
      for (std::size_t i = 0; i < result.inverters.size(); ++i) {
        std::cout << result.inverters[i] << ":";
        for (std::size_t a = 0; a < result.boundaries.size(); ++a)
          std::cout << " " << result.boundaries[a].attribute << "=" << result.curves[i][a].auc;
        std::cout << "\n";
      }
    } else if (*eval) {
      const auto a = workspace::load_image_folder(eval_a).images;
      const auto b = workspace::load_image_folder(eval_b).images;
      json j;
      if (eval_metric == "mse" || eval_metric == "all") j["mse"] = evaluation::mse_metric(a, b);
      if (eval_metric == "swd" || eval_metric == "all") {
        auto sc = cfg.swd;
        sc.seed = common.seed;
        j["swd"] = evaluation::swd(a, b, sc);
        j["swd_config"] = workspace::to_json(sc);
      }
      if (eval_metric == "ffd" || (eval_metric == "all" && !eval_ckpt.empty())) {
        if (eval_ckpt.empty()) throw Error(ErrorKind::kInvalidArgument, "ffd needs --checkpoint with a feature extractor");
        auto ck = load(eval_ckpt, common);
        if (!ck.features) throw Error(ErrorKind::kInvalidArgument, eval_ckpt + " has no feature extractor");
        j["ffd"] = evaluation::ffd(a, b, *ck.features);
      }
      if (!common.out.empty()) workspace::write_text(common.out, j.dump(2) + "\n");
      std::cout << j.dump() << "\n";
    } else if (*serve) {
      frontends::Service service({home(common), serve_ckpt, serve_cap});
      frontends::run_server(service, serve_host, serve_port);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
