#include "juap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace juap {

double fooling_ratio(const torch::Tensor& benign_pred, const torch::Tensor& adv_pred) {
  if (benign_pred.numel() == 0) throw InputError("fooling ratio of an empty set is undefined");
  if (benign_pred.sizes() != adv_pred.sizes()) throw InputError("prediction vectors differ in length");
  return benign_pred.ne(adv_pred).to(torch::kFloat64).mean().item<double>();
}

double fooling_ratio(Classifier& classifier, const torch::Tensor& images, const Perturbation& pert) {
  if (images.size(0) == 0) throw InputError("fooling ratio of an empty set is undefined");
  auto benign = predict_labels(classifier, images);
  auto adv = predict_labels(classifier, apply_perturbation(images, pert.values));
  return fooling_ratio(benign, adv);
}

torch::Tensor l1_per_image(const torch::Tensor& map_benign, const torch::Tensor& map_adv) {
  if (map_benign.sizes() != map_adv.sizes()) throw InputError("l1_discrepancy: map shapes differ");
  return (map_adv.to(torch::kFloat64) - map_benign.to(torch::kFloat64)).abs().flatten(1).mean(1);
}

double l1_discrepancy(const torch::Tensor& map_benign, const torch::Tensor& map_adv) {
  auto per = l1_per_image(map_benign.dim() == 2 ? map_benign.unsqueeze(0) : map_benign,
                          map_adv.dim() == 2 ? map_adv.unsqueeze(0) : map_adv);
  return per.numel() == 0 ? 0.0 : per.mean().item<double>();
}

double iou_score(const torch::Tensor& mask_a, const torch::Tensor& mask_b) {
  if (mask_a.sizes() != mask_b.sizes()) throw InputError("iou_score: mask shapes differ");
  auto a = mask_a.to(torch::kBool), b = mask_b.to(torch::kBool);
  const auto inter = a.logical_and(b).sum().item<int64_t>();
  const auto uni = a.logical_or(b).sum().item<int64_t>();
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

torch::Tensor iou_per_image(const torch::Tensor& masks_a, const torch::Tensor& masks_b) {
  if (masks_a.sizes() != masks_b.sizes()) throw InputError("iou: mask shapes differ");
  auto a = masks_a.to(torch::kBool).flatten(1), b = masks_b.to(torch::kBool).flatten(1);
  auto inter = a.logical_and(b).sum(1).to(torch::kFloat64);
  auto uni = a.logical_or(b).sum(1).to(torch::kFloat64);
  return torch::where(uni > 0, inter / uni.clamp_min(1.0), torch::ones_like(uni));
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    recs.push_back({{"index", r.index},
                    {"label", r.label},
                    {"benign_pred", r.benign_pred},
                    {"adv_pred", r.adv_pred},
                    {"l1", r.l1},
                    {"iou", r.iou}});
  }
  return {{"attack_id", attack_id},     {"classifier_id", classifier_id}, {"interpreter", interpreter},
          {"dataset", dataset},         {"model", model},                 {"FR", fooling_ratio},
          {"L1_mean", l1_mean},         {"IOU_mean", iou_mean},           {"discrepancy_count", discrepancy_count},
          {"per_image", recs},          {"config", config},               {"seed", seed}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.attack_id = j.at("attack_id").get<std::string>();
  r.classifier_id = j.at("classifier_id").get<std::string>();
  r.interpreter = j.at("interpreter").get<std::string>();
  r.dataset = j.value("dataset", "");
  r.model = j.value("model", "");
  r.fooling_ratio = j.at("FR").get<double>();
  r.l1_mean = j.at("L1_mean").get<double>();
  r.iou_mean = j.at("IOU_mean").get<double>();
  r.discrepancy_count = j.value("discrepancy_count", int64_t{0});
  for (const auto& x : j.at("per_image")) {
    r.records.push_back({x.at("index").get<int64_t>(), x.at("label").get<int64_t>(),
                         x.at("benign_pred").get<int64_t>(), x.at("adv_pred").get<int64_t>(),
                         x.at("l1").get<double>(), x.at("iou").get<double>()});
  }
  r.config = j.value("config", nlohmann::json::object());
  r.seed = j.value("seed", uint64_t{0});
  return r;
}

void EvalReport::validate() const {
  if (fooling_ratio < 0.0 || fooling_ratio > 1.0) throw InputError("FR out of [0, 1]");
  if (iou_mean < 0.0 || iou_mean > 1.0) throw InputError("IOU out of [0, 1]");
  if (l1_mean < 0.0) throw InputError("L1 is negative");
}

EvalReport evaluate_attack(Interpreter& interpreter, const ImageBatch& images, const Perturbation& pert,
                           const EvalOptions& options) {
  const int64_t n = images.size();
  if (n == 0) throw InputError("cannot evaluate on an empty test split");
  if (pert.per_image() && pert.values.size(0) != n) {
    throw InputError("per-image perturbations do not match the number of test images");
  }
  auto& clf = interpreter.classifier;
  clf->eval();
  // Evaluation always runs with the plain ReLU backward.
  ScopedActivation plain(clf, ActivationSettings{});

  std::vector<torch::Tensor> benign_pred, adv_pred, l1, iou;
  for (int64_t begin = 0; begin < n; begin += options.chunk) {
    const int64_t end = std::min(begin + options.chunk, n);
    auto x = images.pixels.slice(0, begin, end);
    auto p = pert.per_image() ? pert.values.slice(0, begin, end) : pert.values;
    auto x_adv = apply_perturbation(x, p);
    auto bp = predict_labels(clf, x);
    auto ap = predict_labels(clf, x_adv);
    // Both maps explain the benign prediction.
    auto mb = interpreter.maps(x, bp, false);
    auto ma = interpreter.maps(x_adv, bp, false);
    benign_pred.push_back(bp);
    adv_pred.push_back(ap);
    l1.push_back(l1_per_image(mb, ma));
    iou.push_back(iou_per_image(binarize(mb, options.threshold), binarize(ma, options.threshold)));
  }
  auto bp = torch::cat(benign_pred), ap = torch::cat(adv_pred), l1s = torch::cat(l1), ious = torch::cat(iou);

  EvalReport report;
  report.interpreter = to_string(interpreter.kind);
  report.fooling_ratio = fooling_ratio(bp, ap);
  auto include = options.fooled_only ? bp.ne(ap) : torch::ones({n}, torch::kBool);
  report.discrepancy_count = include.sum().item<int64_t>();
  if (report.discrepancy_count > 0) {
    report.l1_mean = l1s.masked_select(include).mean().item<double>();
    report.iou_mean = ious.masked_select(include).mean().item<double>();
  } else {
    report.l1_mean = 0.0;
    report.iou_mean = 1.0;
  }
  for (int64_t i = 0; i < n; ++i) {
    report.records.push_back({i, images.labels[i].item<int64_t>(), bp[i].item<int64_t>(), ap[i].item<int64_t>(),
                              l1s[i].item<double>(), ious[i].item<double>()});
  }
  report.config = {{"threshold", options.threshold.kind == ThresholdRule::Kind::Percentile ? "percentile" : "fixed"},
                   {"threshold_value", options.threshold.value},
                   {"fooled_only", options.fooled_only},
                   {"p", to_string(pert.p)},
                   {"zeta", pert.zeta}};
  report.validate();
  return report;
}

double roc_auc(const std::vector<double>& positives, const std::vector<double>& negatives) {
  if (positives.empty() || negatives.empty()) throw InputError("AUC needs both positive and negative scores");
  // Rank-sum with average ranks for ties.
  std::vector<std::pair<double, int>> all;
  for (double s : positives) all.emplace_back(s, 1);
  for (double s : negatives) all.emplace_back(s, 0);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (size_t k = i; k < j; ++k) {
      if (all[k].second == 1) rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(positives.size()), nn = static_cast<double>(negatives.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::pair<std::vector<double>, std::vector<double>> discrepancy_scores(Interpreter& interpreter,
                                                                       const torch::Tensor& images,
                                                                       const torch::Tensor& pert,
                                                                       const ThresholdRule& threshold) {
  auto& clf = interpreter.classifier;
  ScopedActivation plain(clf, ActivationSettings{});
  auto bp = predict_labels(clf, images);
  auto mb = interpreter.maps(images, bp, false);
  auto ma = interpreter.maps(apply_perturbation(images, pert), bp, false);
  auto l1 = l1_per_image(mb, ma).contiguous();
  auto iou = iou_per_image(binarize(mb, threshold), binarize(ma, threshold)).contiguous();
  return {{l1.data_ptr<double>(), l1.data_ptr<double>() + l1.numel()},
          {iou.data_ptr<double>(), iou.data_ptr<double>() + iou.numel()}};
}

namespace {

DetectionRow summarize(const std::string& name, std::vector<double> l1, const std::vector<double>& iou) {
  DetectionRow row;
  row.set_name = name;
  row.count = static_cast<int64_t>(l1.size());
  const double n = static_cast<double>(l1.size());
  row.l1_mean = std::accumulate(l1.begin(), l1.end(), 0.0) / n;
  double var = 0.0;
  for (double v : l1) var += (v - row.l1_mean) * (v - row.l1_mean);
  row.l1_std = std::sqrt(var / n);
  row.iou_mean = std::accumulate(iou.begin(), iou.end(), 0.0) / n;
  row.l1_scores = std::move(l1);
  return row;
}

std::vector<double> dissimilarity(const std::vector<double>& iou) {
  std::vector<double> out;
  out.reserve(iou.size());
  for (double v : iou) out.push_back(1.0 - v);
  return out;
}

}  // namespace

DetectionGapTable detection_gap_experiment(Interpreter& interpreter, const torch::Tensor& benign_images,
                                           const std::vector<std::pair<std::string, Perturbation>>& adversarial_sets,
                                           const DetectionOptions& options) {
  if (benign_images.size(0) == 0) throw InputError("detection experiment needs benign images");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(options.seed, "benign-arrival-noise"));
  auto noise = (torch::randint(0, 2, benign_images.sizes(), gen).to(torch::kFloat32) * 2.0 - 1.0) * options.benign_noise;
  auto [ref_l1, ref_iou] = discrepancy_scores(interpreter, benign_images, noise, options.threshold);
  DetectionGapTable table;
  table.reference = summarize("benign", ref_l1, ref_iou);
  table.reference.auc_l1 = 0.5;
  table.reference.auc_iou = 0.5;
  const auto ref_dis = dissimilarity(ref_iou);
  for (const auto& [name, pert] : adversarial_sets) {
    auto p = pert.per_image() ? pert.values.slice(0, 0, benign_images.size(0)) : pert.values;
    auto [l1, iou] = discrepancy_scores(interpreter, benign_images, p, options.threshold);
    auto row = summarize(name, l1, iou);
    row.auc_l1 = roc_auc(l1, ref_l1);
    row.auc_iou = roc_auc(dissimilarity(iou), ref_dis);
    table.rows.push_back(std::move(row));
  }
  return table;
}

const DetectionRow& DetectionGapTable::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.set_name == name) return r;
  }
  throw InputError("no detection row named " + name);
}

std::string DetectionGapTable::to_csv() const {
  std::vector<std::vector<std::string>> out;
  auto fmt = [](double v) {
    std::ostringstream s;
    s.precision(6);
    s << v;
    return s.str();
  };
  auto add = [&](const DetectionRow& r) {
    out.push_back({r.set_name, std::to_string(r.count), fmt(r.l1_mean), fmt(r.l1_std), fmt(r.iou_mean),
                   fmt(r.auc_l1), fmt(r.auc_iou)});
  };
  add(reference);
  for (const auto& r : rows) add(r);
  return juap::to_csv({"set", "count", "L1_mean", "L1_std", "IOU_mean", "AUC_L1", "AUC_IOU"}, out);
}

std::string to_csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  auto field = [](const std::string& f) {
    if (f.find_first_of(",\"\n") == std::string::npos) return f;
    std::string q = "\"";
    for (char c : f) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  };
  std::string out;
  auto line = [&](const std::vector<std::string>& r) {
    for (size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + field(r[i]);
    out += "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(cur);
      cur.clear();
    } else if (c == '\n') {
      row.push_back(cur);
      cur.clear();
      rows.push_back(row);
      row.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (!cur.empty() || !row.empty()) {
    row.push_back(cur);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace juap
