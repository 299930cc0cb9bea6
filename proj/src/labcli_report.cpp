#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "wmlab/attacks.hpp"
#include "wmlab/imageio.hpp"
#include "wmlab/labcli.hpp"
#include "wmlab/nn/convert.hpp"
#include "wmlab/util.hpp"

namespace wmlab {

using nlohmann::json;
namespace fs = std::filesystem;

void to_json(json& j, const MetricsReport& r) {
  j = json{{"psnr_db", r.psnr_db},
           {"ms_ssim", r.ms_ssim},
           {"correlation", r.correlation},
           {"sr_remove", r.sr_remove},
           {"sample_count", r.sample_count}};
}

void from_json(const json& j, MetricsReport& r) {
  r.psnr_db = j.at("psnr_db");
  r.ms_ssim = j.at("ms_ssim");
  r.correlation = j.at("correlation");
  r.sr_remove = j.at("sr_remove");
  r.sample_count = j.at("sample_count");
}

namespace {

bool same(const MetricsReport& a, const MetricsReport& b) {
  return a.psnr_db == b.psnr_db && a.ms_ssim == b.ms_ssim &&
         a.correlation == b.correlation && a.sr_remove == b.sr_remove &&
         a.sample_count == b.sample_count;
}

}  // namespace

bool RunReport::operator==(const RunReport& o) const {
  if (methods.size() != o.methods.size()) return false;
  for (const auto& [k, v] : methods) {
    auto it = o.methods.find(k);
    if (it == o.methods.end() || v.has_value() != it->second.has_value()) return false;
    if (v && !same(*v, *it->second)) return false;
  }
  return task == o.task && config_hash == o.config_hash && stages == o.stages &&
         victim == o.victim && verification == o.verification && ablation == o.ablation &&
         defense == o.defense && budget_sweep == o.budget_sweep && queries == o.queries &&
         artifacts == o.artifacts;
}

void to_json(json& j, const RunReport& r) {
  json stages = json::object();
  for (const auto& [k, s] : r.stages) {
    stages[k] = {{"status", s.status}, {"seconds", s.seconds}, {"error", s.error}};
  }
  json methods = json::object();
  for (const auto& [k, m] : r.methods) methods[k] = m ? json(*m) : json(nullptr);
  j = json{{"task", r.task},
           {"config_hash", r.config_hash},
           {"stages", stages},
           {"methods", methods},
           {"victim", r.victim},
           {"verification", r.verification},
           {"ablation", r.ablation},
           {"defense", r.defense},
           {"budget_sweep", r.budget_sweep},
           {"queries", r.queries},
           {"artifacts", r.artifacts}};
}

void from_json(const json& j, RunReport& r) {
  r.task = j.at("task");
  r.config_hash = j.at("config_hash");
  r.stages.clear();
  for (const auto& [k, s] : j.at("stages").items()) {
    r.stages[k] = {s.at("status"), s.at("seconds"), s.at("error")};
  }
  r.methods.clear();
  for (const auto& [k, m] : j.at("methods").items()) {
    r.methods[k] = m.is_null() ? std::nullopt : std::optional<MetricsReport>(m.get<MetricsReport>());
  }
  r.victim = j.at("victim");
  r.verification = j.at("verification");
  r.ablation = j.at("ablation");
  r.defense = j.at("defense");
  r.budget_sweep = j.at("budget_sweep");
  r.queries = j.at("queries");
  r.artifacts = j.at("artifacts");
}

namespace {

std::string fmt(double v, int prec) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

std::string num(const json& j, const char* key, int prec) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_number()) return "stage skipped";
  return fmt(j[key].get<double>(), prec);
}

/// j[key] when j is an object holding it, otherwise null.
json sub(const json& j, const char* key) {
  return j.is_object() && j.contains(key) ? j[key] : json();
}

std::string pad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

}  // namespace

std::string render_table(const RunReport& r) {
  std::ostringstream out;
  out << "task: " << r.task << "\nconfig: " << r.config_hash << "\n\n";
  const std::size_t w0 = 11, w = 13;
  out << pad("Method", w0) << pad("Correlation", w) << pad("PSNR", w) << pad("MS-SSIM", w)
      << "SR_Remove\n";
  out << std::string(w0 + 3 * w + 9, '-') << "\n";
  for (const auto& name : report_methods()) {
    out << pad(name, w0);
    auto it = r.methods.find(name);
    if (it == r.methods.end() || !it->second) {
      out << "stage skipped\n";
      continue;
    }
    const MetricsReport& m = *it->second;
    out << pad(fmt(m.correlation, 4), w) << pad(fmt(m.psnr_db, 2), w)
        << pad(fmt(m.ms_ssim, 4), w) << fmt(m.sr_remove, 3) << "\n";
  }
  out << "\nvictim: fidelity " << num(r.victim, "fidelity_psnr_db", 2) << " dB, extraction "
      << num(r.victim, "extraction_rate", 3) << ", null mean "
      << num(r.victim, "null_mean", 3) << "\n";
  const json& ver = r.verification;
  out << "additive: residual extraction rate "
      << num(sub(ver, "additive"), "rate_above_0_9", 3) << "\n";
  out << "delta-approx: mean correlation "
      << num(sub(ver, "delta_approx"), "correlation", 4) << "\n";
  out << "noise: mean correlation " << num(sub(ver, "noise"), "correlation", 4)
      << "\n";
  const json& abl = r.ablation;
  out << "ablation: inversion psnr loss " << num(abl, "inversion_psnr_loss_db", 2)
      << " dB, forward SR_Remove " << num(sub(sub(abl, "forward"), "metrics"), "sr_remove", 3)
      << "\n";
  out << "defense: bypass flagged " << num(r.defense, "bypass_flagged_rate", 3)
      << ", genuine flagged " << num(r.defense, "genuine_flagged_rate", 3)
      << ", attack aborted ";
  if (r.defense.is_object() && r.defense.contains("attack_aborted")) {
    out << (r.defense["attack_aborted"].get<bool>() ? "yes" : "no");
  } else {
    out << "stage skipped";
  }
  out << "\n\nstages:\n";
  std::vector<std::pair<std::string, StageSummary>> ordered;
  for (const auto& name : pipeline_stages()) {
    if (auto it = r.stages.find(name); it != r.stages.end()) ordered.push_back(*it);
  }
  for (const auto& kv : r.stages) {
    if (std::find(pipeline_stages().begin(), pipeline_stages().end(), kv.first) ==
        pipeline_stages().end()) {
      ordered.push_back(kv);
    }
  }
  for (const auto& [k, s] : ordered) {
    out << "  " << pad(k, 22) << pad(s.status, 9) << fmt(s.seconds, 1) << " s";
    if (!s.error.empty()) out << "  " << s.error;
    out << "\n";
  }
  return out.str();
}

void emit_report(const RunReport& r, const fs::path& dir,
                 const std::vector<ReportFormat>& formats) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  for (ReportFormat f : formats) {
    if (f == ReportFormat::json) {
      write_file(dir / "report.json", json(r).dump(2) + "\n");
    } else {
      write_file(dir / "report.txt", render_table(r));
    }
  }
}

// ---- figures ----

namespace {

ImageTensor as_rgb(const ImageTensor& img) {
  if (img.channels() == 3) return img;
  std::vector<double> d(img.size() * 3);
  for (std::size_t i = 0; i < img.size(); ++i)
    for (int c = 0; c < 3; ++c) d[i * 3 + c] = img.data()[i];
  return ImageTensor({img.height(), img.width(), 3}, std::move(d));
}

/// Tiles rows of equally sized images with a white gutter.
ImageTensor grid(const std::vector<std::vector<ImageTensor>>& rows) {
  const int gap = 2;
  const int th = rows.at(0).at(0).height(), tw = rows[0][0].width();
  const int cols = static_cast<int>(rows[0].size());
  const int h = static_cast<int>(rows.size()) * (th + gap) + gap;
  const int w = cols * (tw + gap) + gap;
  std::vector<double> d(static_cast<std::size_t>(h) * w * 3, 1.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int c = 0; c < cols; ++c) {
      const ImageTensor t = as_rgb(rows[r].at(c));
      if (t.height() != th || t.width() != tw) throw ShapeError("figure: tile size mismatch");
      const int oy = gap + static_cast<int>(r) * (th + gap), ox = gap + c * (tw + gap);
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x)
          for (int ch = 0; ch < 3; ++ch)
            d[((static_cast<std::size_t>(oy + y) * w) + ox + x) * 3 + ch] = t.at(y, x, ch);
    }
  }
  return ImageTensor({h, w, 3}, std::move(d));
}

std::string png_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d.png", i);
  return buf;
}

}  // namespace

std::vector<fs::path> render_figures(const fs::path& root, const EvalSettings& eval) {
  std::vector<fs::path> written;
  if (!fs::exists(root / "victim" / "manifest.json") || !fs::exists(root / "eval" / "bprime")) {
    return written;
  }
  const VictimBundle bundle = VictimBundle::load(root / "victim");
  const fs::path fig = root / "figures";
  fs::create_directories(fig);
  std::vector<ImageTensor> a, b, bp;
  for (int i = 0; i < eval.figure_rows; ++i) {
    const auto f = png_name(i);
    if (!fs::exists(root / "eval" / "bprime" / f)) break;
    a.push_back(read_png(root / "eval" / "a" / f));
    b.push_back(read_png(root / "eval" / "b" / f));
    bp.push_back(read_png(root / "eval" / "bprime" / f));
  }
  if (a.empty()) return written;
  const auto e_bp = extract_all(*bundle.enet, bp);

  // Removal grids: a, b, b', b-hat, delta, E(b'), E(b-hat).
  for (const std::string method : {"inversion", "forward"}) {
    const fs::path dir = root / "removal" / method;
    if (!fs::exists(dir / png_name(0))) continue;
    std::vector<ImageTensor> bh;
    for (std::size_t i = 0; i < a.size(); ++i) bh.push_back(read_png(dir / png_name(int(i))));
    const auto e_bh = extract_all(*bundle.enet, bh);
    std::vector<std::vector<ImageTensor>> rows;
    for (std::size_t i = 0; i < a.size(); ++i) {
      rows.push_back({a[i], b[i], bp[i], bh[i], bundle.delta.image(), e_bp[i], e_bh[i]});
    }
    const fs::path out = fig / ("removal_" + method + ".png");
    write_png(out, grid(rows));
    written.push_back(out);
  }

  // Residual grid: b, b', amplified b' - b, E(remapped residual), delta.
  {
    std::vector<std::vector<ImageTensor>> rows;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const AdditiveCheck chk = verify_additive(bundle, b[i], bp[i]);
      rows.push_back({b[i], bp[i], chk.residual.amplified(eval.residual_gain), chk.extracted,
                      bundle.delta.image()});
    }
    const fs::path out = fig / "residual.png";
    write_png(out, grid(rows));
    written.push_back(out);
  }

  // Noise grid: a, b, true noise a - b, estimate SNet(a) - b' (both 2x).
  if (fs::exists(root / "attack" / "forward" / "manifest.json")) {
    auto snet = nn::Network::create(
        json::parse(read_file(root / "attack" / "forward" / "manifest.json"))
            .at("spec")
            .get<nn::NetworkSpec>());
    snet->load(root / "attack" / "forward" / "model.bin");
    const Surrogate s = as_surrogate(*snet);
    std::vector<std::vector<ImageTensor>> rows;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Residual truth = Residual::difference(a[i], b[i], ResidualRole::noise_gt);
      const Residual est = estimate_noise(s, a[i], bp[i]);
      rows.push_back({a[i], b[i], truth.amplified(2.0), est.amplified(2.0)});
    }
    const fs::path out = fig / "noise.png";
    write_png(out, grid(rows));
    written.push_back(out);
  }
  return written;
}

}  // namespace wmlab
