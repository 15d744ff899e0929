#ifndef LLATTE_EVENTS_HPP_
#define LLATTE_EVENTS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "llatte/common.hpp"
#include "llatte/rng.hpp"

namespace llatte {

inline constexpr double kPi = 3.14159265358979323846;

enum class ActionType { kView = 0, kClick = 1, kConversion = 2, kOrganic = 3 };

inline const char* action_type_name(ActionType t) {
  switch (t) {
    case ActionType::kView: return "view";
    case ActionType::kClick: return "click";
    case ActionType::kConversion: return "conversion";
    case ActionType::kOrganic: return "organic";
  }
  return "?";
}

inline ActionType action_type_from_name(const std::string& s) {
  if (s == "view") return ActionType::kView;
  if (s == "click") return ActionType::kClick;
  if (s == "conversion") return ActionType::kConversion;
  if (s == "organic") return ActionType::kOrganic;
  throw ValueError(strfmt("unknown action type '%s'", s.c_str()));
}

struct ActionEvent {
  int64_t timestamp_s = 0;
  ActionType action_type = ActionType::kView;
  int item_id = 0;
  int surface_id = 0;
  bool has_content = false;            // logging may drop the content vector
  std::vector<double> content_vec;     // unit norm when present
  int meta_id = 0;
};

struct UserHistory {
  int64_t user_id = 0;
  std::vector<ActionEvent> events;     // oldest first
  std::vector<double> latent_interest; // generator ground truth, never a model input

  void check_sorted() const {
    for (size_t i = 1; i < events.size(); ++i)
      if (events[i].timestamp_s < events[i - 1].timestamp_s)
        throw ValueError(strfmt("user %lld events out of order at index %zu",
                                static_cast<long long>(user_id), i));
  }
};

struct Candidate {
  int ad_id = 0;
  int advertiser_id = 0;
  std::vector<double> content_vec;     // unit norm
};

struct RequestContext {
  int64_t request_time_s = 0;
  int surface_id = 0;
  int device_id = 0;
};

// One scored request. The user's history is shared between the examples of
// that user; visible_count marks the snapshot boundary (events strictly
// before the request time), so no example can see its own future.
struct LabeledExample {
  std::shared_ptr<const UserHistory> user;
  int visible_count = 0;
  Candidate candidate;
  RequestContext context;
  std::vector<double> cross_features;
  bool label_ctr = false;
  bool label_cvr = false;

  const ActionEvent* visible_begin() const { return user->events.data(); }
  const ActionEvent* visible_end() const { return user->events.data() + visible_count; }
};

struct Dataset {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> eval;
};

struct GeneratorConfig {
  int num_users = 200;
  int horizon_days = 30;
  double events_per_day = 8.0;
  double conversion_fraction = 0.05;   // unconditional share of events that convert
  int d_content = 16;
  double seasonality_amplitude = 0.6;  // 24 h intensity modulation, in [0,1]
  int long_range_days = 14;
  int recent_window = 20;              // K_recent events feeding the short-range term
  double target_positive_rate = 0.10;  // p*, hit by bias search
  double noise_scale = 0.15;           // latent drift per day and item-choice scatter
  uint64_t seed = 1;

  void validate() const {
    if (num_users < 1) throw ConfigError("num_users must be >= 1");
    if (horizon_days < 1) throw ConfigError("horizon_days must be >= 1");
    if (events_per_day <= 0) throw ConfigError("events_per_day must be positive");
    if (conversion_fraction <= 0 || conversion_fraction >= kClickRate)
      throw ConfigError(strfmt("conversion_fraction must lie in (0,%g)", kClickRate));
    if (d_content < 2) throw ConfigError("d_content must be >= 2");
    if (seasonality_amplitude < 0 || seasonality_amplitude > 1)
      throw ConfigError("seasonality_amplitude must lie in [0,1]");
    if (long_range_days < 1) throw ConfigError("long_range_days must be >= 1");
    if (recent_window < 1) throw ConfigError("recent_window must be >= 1");
    if (target_positive_rate <= 0 || target_positive_rate >= 1)
      throw ConfigError("target_positive_rate must lie in (0,1)");
    if (noise_scale < 0) throw ConfigError("noise_scale must be >= 0");
  }

  // Generator constants, fixed so datasets are comparable across configs.
  static constexpr double kClickRate = 0.30;        // P(click | event)
  static constexpr double kOrganicShare = 0.20;     // share of non-clicks logged as organic
  static constexpr double kContentDropRate = 0.10;  // share of events logged without content
  static constexpr int kNumItems = 512;
  static constexpr int kNumAds = 256;
  static constexpr int kAdsPerAdvertiser = 8;
  static constexpr int kItemChoicePool = 24;        // catalog draws per event, best cosine wins
  static constexpr int kRequestsPerUser = 8;
  static constexpr double kTargetedAdShare = 0.5;   // rest of the ads drawn uniformly
  static constexpr double kEvalTimeFraction = 0.8;  // requests after this point are eval
  static constexpr double kFirstRequestFraction = 0.25;
  static constexpr double kCvrGivenClick = 0.4;     // thinning factor for the CVR head
  // Planted logit weights: short-range content match, long-range conversion
  // match, and daily-phase match.
  static constexpr double kW1 = 2.0;
  static constexpr double kW2 = 3.0;
  static constexpr double kW3 = 0.8;
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline void normalize(std::vector<double>& a) {
  double n = norm(a);
  if (n == 0.0) {
    a[0] = 1.0;  // arbitrary but deterministic direction for the zero vector
    return;
  }
  for (double& v : a) v /= n;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline std::vector<double> random_unit(Rng& rng, int d) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  normalize(v);
  return v;
}

}  // namespace detail

// Balanced-mixture sequence composition: keep the most recent conv_quota
// conversions and views_quota view/click/organic events, backfilling from the
// other category when one runs short, merged oldest-first.
inline std::vector<ActionEvent> compose_sequence(const ActionEvent* begin, const ActionEvent* end,
                                                 int T, int views_quota, int conv_quota) {
  if (views_quota < 0 || conv_quota < 0 || views_quota + conv_quota != T)
    throw ValueError(strfmt("quotas %d+%d must sum to the length budget %d", views_quota, conv_quota, T));
  std::vector<int> conv_idx, view_idx;
  int n = static_cast<int>(end - begin);
  for (int i = 0; i < n; ++i) {
    if (begin[i].action_type == ActionType::kConversion) conv_idx.push_back(i);
    else view_idx.push_back(i);
  }
  int take_conv = std::min<int>(conv_quota, static_cast<int>(conv_idx.size()));
  int take_view = std::min<int>(views_quota, static_cast<int>(view_idx.size()));
  // Backfill unused quota from the other category, most recent first.
  take_view = std::min<int>(take_view + (conv_quota - take_conv), static_cast<int>(view_idx.size()));
  take_conv = std::min<int>(take_conv + (views_quota + conv_quota - take_conv - take_view),
                            static_cast<int>(conv_idx.size()));
  std::vector<int> chosen;
  chosen.insert(chosen.end(), conv_idx.end() - take_conv, conv_idx.end());
  chosen.insert(chosen.end(), view_idx.end() - take_view, view_idx.end());
  std::sort(chosen.begin(), chosen.end());
  std::vector<ActionEvent> out;
  out.reserve(chosen.size());
  for (int i : chosen) out.push_back(begin[i]);
  return out;
}

inline std::vector<ActionEvent> compose_sequence(const UserHistory& history, int T, int views_quota,
                                                 int conv_quota) {
  return compose_sequence(history.events.data(), history.events.data() + history.events.size(), T,
                          views_quota, conv_quota);
}

inline std::vector<ActionEvent> truncate_to_horizon(const std::vector<ActionEvent>& events, int T) {
  if (T < 0) throw ValueError("horizon length must be >= 0");
  size_t keep = std::min<size_t>(events.size(), static_cast<size_t>(T));
  return std::vector<ActionEvent>(events.end() - keep, events.end());
}

namespace detail {

// Fixed catalogs of unit-norm content directions, derived purely from seed.
struct Catalog {
  std::vector<std::vector<double>> items;
  std::vector<std::vector<double>> ads;

  Catalog(uint64_t seed, int d_content) {
    Rng rng = Rng(seed).sub("catalog", 0);
    items.reserve(GeneratorConfig::kNumItems);
    for (int i = 0; i < GeneratorConfig::kNumItems; ++i) items.push_back(random_unit(rng, d_content));
    ads.reserve(GeneratorConfig::kNumAds);
    for (int i = 0; i < GeneratorConfig::kNumAds; ++i) ads.push_back(random_unit(rng, d_content));
  }

  // Best-cosine pick from `pool` uniform draws, biased toward `target`.
  int pick_item(Rng& rng, const std::vector<double>& target, int pool) const {
    int best = rng.uniform_int(static_cast<int>(items.size()));
    double best_cos = cosine(items[best], target);
    for (int k = 1; k < pool; ++k) {
      int j = rng.uniform_int(static_cast<int>(items.size()));
      double c = cosine(items[j], target);
      if (c > best_cos) {
        best = j;
        best_cos = c;
      }
    }
    return best;
  }

  int pick_ad(Rng& rng, const std::vector<double>& target, int pool) const {
    int best = rng.uniform_int(static_cast<int>(ads.size()));
    double best_cos = cosine(ads[best], target);
    for (int k = 1; k < pool; ++k) {
      int j = rng.uniform_int(static_cast<int>(ads.size()));
      double c = cosine(ads[j], target);
      if (c > best_cos) {
        best = j;
        best_cos = c;
      }
    }
    return best;
  }
};

}  // namespace detail

// Generates one user's event stream over the horizon: an hourly Poisson
// process whose intensity carries a 24 h periodic component with a
// user-specific phase, item choices that track a slowly drifting latent
// interest, and conversions thinned out of clicks.
inline std::shared_ptr<UserHistory> generate_user(const GeneratorConfig& cfg,
                                                  const detail::Catalog& catalog, int64_t user_id) {
  Rng base = Rng(cfg.seed).sub("user", static_cast<uint64_t>(user_id));
  Rng ev_rng = base.sub("events", 0);
  Rng drift_rng = base.sub("drift", 0);

  auto hist = std::make_shared<UserHistory>();
  hist->user_id = user_id;
  hist->latent_interest = detail::random_unit(drift_rng, cfg.d_content);
  std::vector<double> interest = hist->latent_interest;

  double phase_h = base.sub("phase", 0).uniform(0.0, 24.0);
  double conv_given_click = cfg.conversion_fraction / GeneratorConfig::kClickRate;
  int horizon_hours = cfg.horizon_days * 24;
  double base_rate = cfg.events_per_day / 24.0;

  for (int hour = 0; hour < horizon_hours; ++hour) {
    if (hour > 0 && hour % 24 == 0) {
      // Daily drift of the latent interest.
      for (double& v : interest) v += cfg.noise_scale * drift_rng.normal();
      detail::normalize(interest);
    }
    double hod = static_cast<double>(hour % 24);
    double lambda = base_rate *
                    (1.0 + cfg.seasonality_amplitude * std::cos(2.0 * kPi * (hod - phase_h) / 24.0));
    int count = ev_rng.poisson(std::max(0.0, lambda));
    std::vector<double> offsets(count);
    for (double& o : offsets) o = ev_rng.uniform(0.0, 3600.0);
    std::sort(offsets.begin(), offsets.end());
    for (double o : offsets) {
      ActionEvent e;
      e.timestamp_s = static_cast<int64_t>(hour) * 3600 + static_cast<int64_t>(o);
      std::vector<double> target = interest;
      for (double& v : target) v += cfg.noise_scale * ev_rng.normal();
      detail::normalize(target);
      e.item_id = catalog.pick_item(ev_rng, target, GeneratorConfig::kItemChoicePool);
      e.content_vec = catalog.items[e.item_id];
      e.has_content = !ev_rng.bernoulli(GeneratorConfig::kContentDropRate);
      if (!e.has_content) e.content_vec.clear();
      e.surface_id = ev_rng.uniform_int(4);
      e.meta_id = ev_rng.uniform_int(16);
      if (ev_rng.bernoulli(GeneratorConfig::kClickRate)) {
        e.action_type =
            ev_rng.bernoulli(conv_given_click) ? ActionType::kConversion : ActionType::kClick;
      } else {
        e.action_type =
            ev_rng.bernoulli(GeneratorConfig::kOrganicShare) ? ActionType::kOrganic : ActionType::kView;
      }
      hist->events.push_back(std::move(e));
    }
  }
  return hist;
}

namespace detail {

// Ground-truth planted logit, bias excluded. Uses true (pre-drop) content:
// the generator knows every item's vector even when logging omitted it.
struct RequestDraft {
  LabeledExample ex;
  double logit_no_bias = 0.0;
  bool is_eval = false;
};

inline double planted_logit(const GeneratorConfig& cfg, const Catalog& catalog,
                            const UserHistory& hist, int visible, const Candidate& cand,
                            int64_t request_time_s, double phase_h) {
  // Short-range term: mean true content of the last K_recent events.
  std::vector<double> recent(cfg.d_content, 0.0);
  int lo = std::max(0, visible - cfg.recent_window);
  for (int i = lo; i < visible; ++i) {
    const std::vector<double>& c = catalog.items[hist.events[i].item_id];
    for (int j = 0; j < cfg.d_content; ++j) recent[j] += c[j];
  }
  // Long-range term: mean true content of conversions inside the window.
  std::vector<double> conv(cfg.d_content, 0.0);
  int64_t window_start = request_time_s - static_cast<int64_t>(cfg.long_range_days) * 86400;
  bool any_conv = false;
  for (int i = 0; i < visible; ++i) {
    const ActionEvent& e = hist.events[i];
    if (e.action_type != ActionType::kConversion) continue;
    if (e.timestamp_s < window_start) continue;
    const std::vector<double>& c = catalog.items[e.item_id];
    for (int j = 0; j < cfg.d_content; ++j) conv[j] += c[j];
    any_conv = true;
  }
  double term1 = visible > lo ? cosine(cand.content_vec, recent) : 0.0;
  double term2 = any_conv ? cosine(cand.content_vec, conv) : 0.0;
  double hod = static_cast<double>((request_time_s / 3600) % 24) +
               static_cast<double>(request_time_s % 3600) / 3600.0;
  double term3 = std::cos(2.0 * kPi * (hod - phase_h) / 24.0);
  return GeneratorConfig::kW1 * term1 + GeneratorConfig::kW2 * term2 + GeneratorConfig::kW3 * term3;
}

}  // namespace detail

// Full dataset draw: per-user event streams, per-user request draws with
// planted logits, a bias bisection to hit the target positive rate, then
// Bernoulli labels and a strictly-later-in-time eval split.
inline Dataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  detail::Catalog catalog(cfg.seed, cfg.d_content);
  int64_t horizon_s = static_cast<int64_t>(cfg.horizon_days) * 86400;
  int64_t first_req = static_cast<int64_t>(GeneratorConfig::kFirstRequestFraction * horizon_s);
  int64_t eval_split = static_cast<int64_t>(GeneratorConfig::kEvalTimeFraction * horizon_s);

  std::vector<detail::RequestDraft> drafts;
  drafts.reserve(static_cast<size_t>(cfg.num_users) * GeneratorConfig::kRequestsPerUser);
  for (int64_t uid = 0; uid < cfg.num_users; ++uid) {
    std::shared_ptr<UserHistory> hist = generate_user(cfg, catalog, uid);
    Rng base = Rng(cfg.seed).sub("user", static_cast<uint64_t>(uid));
    double phase_h = base.sub("phase", 0).uniform(0.0, 24.0);
    Rng req_rng = base.sub("requests", 0);
    std::vector<int64_t> times(GeneratorConfig::kRequestsPerUser);
    for (int64_t& t : times) t = first_req + static_cast<int64_t>(req_rng.uniform() * (horizon_s - first_req));
    std::sort(times.begin(), times.end());
    for (int64_t t : times) {
      detail::RequestDraft d;
      d.ex.user = hist;
      d.ex.visible_count = static_cast<int>(
          std::upper_bound(hist->events.begin(), hist->events.end(), t,
                           [](int64_t v, const ActionEvent& e) { return v <= e.timestamp_s; }) -
          hist->events.begin());
      d.ex.context.request_time_s = t;
      d.ex.context.surface_id = req_rng.uniform_int(4);
      d.ex.context.device_id = req_rng.uniform_int(4);
      // Ad draw: a targeted share tracks the user's current interest, the
      // rest is uniform background traffic.
      std::vector<double> interest = hist->latent_interest;
      if (d.ex.visible_count > 0) {
        // Approximate interest at request time by the last visible content.
        interest = catalog.items[hist->events[d.ex.visible_count - 1].item_id];
      }
      int ad;
      if (req_rng.bernoulli(GeneratorConfig::kTargetedAdShare))
        ad = catalog.pick_ad(req_rng, interest, GeneratorConfig::kItemChoicePool);
      else
        ad = req_rng.uniform_int(GeneratorConfig::kNumAds);
      d.ex.candidate.ad_id = ad;
      d.ex.candidate.advertiser_id = ad / GeneratorConfig::kAdsPerAdvertiser;
      d.ex.candidate.content_vec = catalog.ads[ad];
      // Observable user-ad crosses: last-event content match plus a
      // deterministic advertiser-user hash feature (pure noise).
      double last_cos = 0.0;
      if (d.ex.visible_count > 0) {
        const ActionEvent& last = hist->events[d.ex.visible_count - 1];
        if (last.has_content) last_cos = detail::cosine(last.content_vec, d.ex.candidate.content_vec);
      }
      double hash_feat =
          (Rng::derive(cfg.seed, "xfeat", static_cast<uint64_t>(uid) * 1000003u + ad) >> 11) *
              (2.0 * 0x1.0p-53) - 1.0;
      d.ex.cross_features = {last_cos, 0.1 * hash_feat};
      d.logit_no_bias = detail::planted_logit(cfg, catalog, *hist, d.ex.visible_count,
                                              d.ex.candidate, t, phase_h);
      d.is_eval = t >= eval_split;
      drafts.push_back(std::move(d));
    }
  }

  // Bias bisection: mean sigmoid(z + b) is monotone in b, so bisect on the
  // closed interval [-10, 10] and fail if p* is outside the attainable range.
  auto mean_rate = [&](double b) {
    double s = 0.0;
    for (const detail::RequestDraft& d : drafts) s += 1.0 / (1.0 + std::exp(-(d.logit_no_bias + b)));
    return s / static_cast<double>(drafts.size());
  };
  double lo = -10.0, hi = 10.0;
  if (mean_rate(lo) > cfg.target_positive_rate || mean_rate(hi) < cfg.target_positive_rate)
    throw ValueError(strfmt("target positive rate %g unreachable with bias in [-10,10]",
                            cfg.target_positive_rate));
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (mean_rate(mid) < cfg.target_positive_rate) lo = mid;
    else hi = mid;
  }
  double bias = 0.5 * (lo + hi);

  Dataset out;
  for (size_t i = 0; i < drafts.size(); ++i) {
    detail::RequestDraft& d = drafts[i];
    Rng lab = Rng(cfg.seed).sub("labels", static_cast<uint64_t>(i));
    double p_ctr = 1.0 / (1.0 + std::exp(-(d.logit_no_bias + bias)));
    d.ex.label_ctr = lab.bernoulli(p_ctr);
    // Conversions are a thinned subset of clicks, so CVR-positive implies
    // CTR-positive by construction.
    d.ex.label_cvr = d.ex.label_ctr && lab.bernoulli(GeneratorConfig::kCvrGivenClick);
    (d.is_eval ? out.eval : out.train).push_back(std::move(d.ex));
  }
  return out;
}

}  // namespace llatte

#endif  // LLATTE_EVENTS_HPP_
