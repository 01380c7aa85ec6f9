#pragma once

// Teaching service: live lifelong sessions behind HTTP endpoints with a
// server-sent event stream and on-disk persistence.

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgbdvit/data.hpp"
#include "rgbdvit/depthrep.hpp"
#include "rgbdvit/error.hpp"
#include "rgbdvit/evalharness.hpp"
#include "rgbdvit/fusion.hpp"
#include "rgbdvit/image_io.hpp"
#include "rgbdvit/lifelong.hpp"
#include "rgbdvit/util.hpp"

// After Eigen: <resolv.h> defines a _res macro that breaks Eigen headers.
#include <httplib.h>

namespace rgbdvit::teachd {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Wire samples

struct WireSample {
  std::vector<std::uint8_t> rgb;
  std::vector<std::uint8_t> depth;  // 16-bit PNG, millimeters
  depth::DepthFormat encoding = depth::DepthFormat::surfnorm;
  std::string tag;
};

inline std::vector<std::uint8_t> decode_field(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) throw PayloadError(std::string("missing base64 field '") + key + "'");
  try {
    return base64_decode(j.at(key).get<std::string>());
  } catch (const std::exception& e) {
    throw PayloadError(std::string("field '") + key + "' is not valid base64: " + e.what());
  }
}

inline depth::DepthFormat encoding_of(const std::string& s) {
  try {
    return depth::depth_format_from_string(s);
  } catch (const InvalidArgument&) {
    throw PayloadError("unknown depth encoding '" + s + "' (expected raw, hha or surfnorm)");
  }
}

inline WireSample sample_from_json(const json& j) {
  if (!j.is_object()) throw PayloadError("request body must be an object");
  WireSample s;
  s.rgb = decode_field(j, "rgb");
  s.depth = decode_field(j, "depth");
  if (j.contains("encoding")) s.encoding = encoding_of(j.at("encoding").get<std::string>());
  s.tag = j.value("tag", "");
  return s;
}

inline json sample_to_json(const WireSample& s) {
  json j = {{"rgb", base64_encode(s.rgb)}, {"depth", base64_encode(s.depth)}, {"encoding", depth::to_string(s.encoding)}};
  if (!s.tag.empty()) j["tag"] = s.tag;
  return j;
}

// ---------------------------------------------------------------------------
// Extractor

struct Extractor {
  std::string checkpoint;
  std::string fingerprint;
  fusion::FusionModel<float> model;
  depth::PreprocessSpec preprocess;
  data::DepthSettings depth;

  fusion::RgbdSample<float> prepare(const WireSample& w) const {
    auto rgb = io::image_from_png(w.rgb);
    auto raster = io::decode_png(w.depth);
    auto dm = io::depth_from_raster(raster);
    if (rgb.width != dm.width || rgb.height != dm.height)
      throw PayloadError("rgb is " + std::to_string(rgb.width) + "x" + std::to_string(rgb.height) + " but depth is " +
                         std::to_string(dm.width) + "x" + std::to_string(dm.height));
    auto enc = depth::encode_depth(dm, depth.intrinsics_for(dm.width, dm.height), w.encoding, depth.d_max, depth.window);
    fusion::RgbdSample<float> s;
    s.rgb = depth::preprocess<float>(rgb, preprocess);
    s.depth = depth::preprocess<float>(enc, preprocess);
    s.id = w.tag;
    return s;
  }

  std::vector<float> features(const WireSample& w) const {
    auto s = prepare(w);
    auto h = fusion::extract<float>(std::span<const fusion::RgbdSample<float>>(&s, 1), model);
    return h.data;
  }
};

// Loads `path` and, when `fusion` names a different mode than the checkpoint,
// derives that mode from a unimodal checkpoint.
inline std::shared_ptr<const Extractor> load_extractor(const fs::path& path, const std::string& fusion_label,
                                                       const data::DepthSettings& depth) {
  nn::Checkpoint<float> ck;
  try {
    ck = nn::load_checkpoint<float>(path);
  } catch (const std::exception& e) {
    throw InvalidCheckpoint("cannot load checkpoint '" + path.string() + "': " + e.what());
  }
  auto ex = std::make_shared<Extractor>();
  ex->checkpoint = path.string();
  auto spec = fusion::spec_of(ck);
  if (fusion_label.empty() || fusion_label == spec.label()) {
    ex->model = fusion::model_from_checkpoint(std::move(ck));
  } else {
    fusion::FusionSpec target = spec;
    if (fusion_label.rfind("late-", 0) == 0) {
      target.mode = fusion::Mode::late;
      target.late_op = fusion::late_op_from_string(fusion_label.substr(5));
    } else {
      target.mode = fusion::mode_from_string(fusion_label);
      target.late_op.reset();
    }
    ex->model = fusion::init_from_rgb_checkpoint(ck, target, 0);
  }
  eval::require_frozen_regime(ex->model);
  ex->fingerprint = fusion::fingerprint(ex->model);
  ex->preprocess = depth::PreprocessSpec::square(ex->model.spec.base.image_size);
  ex->depth = depth;
  return ex;
}

// ---------------------------------------------------------------------------
// Sessions

struct ServiceConfig {
  fs::path checkpoint;
  std::string fusion;  // empty: the checkpoint's own mode
  fs::path data_dir;   // empty: no persistence
  data::DepthSettings depth;
  std::size_t k = 3;
};

class LiveSession {
 public:
  LiveSession(std::string id, std::shared_ptr<const Extractor> ex, std::size_t k)
      : id_(std::move(id)), extractor_(std::move(ex)), core_(k), created_(now_iso()) {}

  const std::string& id() const { return id_; }
  const Extractor& extractor() const { return *extractor_; }
  const std::string& created() const { return created_; }

  json meta() const {
    return {{"session_id", id_},
            {"checkpoint", extractor_->checkpoint},
            {"fingerprint", extractor_->fingerprint},
            {"fusion", extractor_->model.spec.label()},
            {"k", core_.k()},
            {"created", created_}};
  }

  json teach(std::span<const float> f, const std::string& label, const std::string& tag) {
    std::unique_lock lock(mu_);
    auto ack = core_.teach(f, label, tag);
    json body = {{"event", ack.seq},
                 {"category", label},
                 {"category_id", ack.category},
                 {"new_category", ack.new_category},
                 {"support_size", ack.support_size}};
    publish(lock, body);
    return body;
  }

  json ask(std::span<const float> f, const std::string& tag, double extract_ms) {
    const auto t0 = std::chrono::steady_clock::now();
    std::unique_lock lock(mu_);
    json body;
    if (core_.support().size() == 0) {
      body = {{"event", nullptr}, {"label", lifelong::kUnknownLabel}, {"scores", json::array()}};
    } else {
      auto r = core_.ask(f, tag);
      json scores = json::array();
      for (std::size_t c = 0; c < r.scores.size(); ++c)
        scores.push_back({{"category", core_.support().categories()[c]}, {"similarity", r.scores[c]}});
      body = {{"event", r.seq}, {"label", r.label}, {"scores", scores}};
    }
    const double ms = extract_ms + std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    body["latency_ms"] = ms;
    if (!body["event"].is_null()) publish(lock, body);
    return body;
  }

  json correct(std::uint64_t ask_seq, const std::string& label) {
    std::unique_lock lock(mu_);
    auto ack = core_.correct_event(ask_seq, label);
    json body = {{"event", ack.seq},
                 {"corrects", ask_seq},
                 {"category", label},
                 {"category_id", ack.category},
                 {"new_category", ack.new_category},
                 {"support_size", ack.support_size}};
    publish(lock, body);
    return body;
  }

  json state() const {
    std::shared_lock lock(mu_);
    const auto& sup = core_.support();
    auto counts = sup.rows_per_category();
    json cats = json::array();
    for (std::size_t c = 0; c < sup.categories().size(); ++c) {
      std::size_t taught = 0, corrected = 0;
      for (const auto& r : sup.rows())
        if (r.category == static_cast<int>(c)) (r.provenance == lifelong::Provenance::taught ? taught : corrected)++;
      cats.push_back({{"name", sup.categories()[c]}, {"instances", counts[c]}, {"taught", taught}, {"corrected", corrected}});
    }
    std::size_t asks = 0, wrong = 0;
    for (const auto& e : core_.log())
      if (e.kind == lifelong::EventKind::ask) {
        ++asks;
        wrong += e.correct.has_value() && !*e.correct;
      }
    json j = meta();
    j["categories"] = cats;
    j["support_size"] = sup.size();
    j["event_count"] = core_.log().size();
    j["last_event"] = core_.last_seq();
    j["asks"] = asks;
    j["qci"] = core_.qci();
    j["gca"] = asks ? json(100.0 * double(asks - wrong) / double(asks)) : json(nullptr);
    return j;
  }

  // Stream events with seq > since; blocks up to `timeout` when none exist.
  std::vector<json> events_since(std::uint64_t since, std::chrono::milliseconds timeout,
                                 const std::function<bool()>& stop = {}) const {
    std::unique_lock lock(feed_mu_);
    auto ready = [&] { return feed_.size() > since || (stop && stop()); };
    if (timeout.count() > 0) feed_cv_.wait_for(lock, timeout, ready);
    std::vector<json> out;
    for (std::size_t i = since; i < feed_.size(); ++i) out.push_back(feed_[i]);
    return out;
  }

  void wake() const { feed_cv_.notify_all(); }

  // Full log with features, enough to rebuild the session exactly.
  json snapshot() const {
    std::shared_lock lock(mu_);
    json log = json::array();
    for (const auto& e : core_.log()) log.push_back(lifelong::to_json(e, core_.support().categories(), true));
    json j = meta();
    j["last_event"] = core_.last_seq();
    j["log"] = log;
    return j;
  }

  // Re-applies persisted events in order; asks are re-classified and must
  // reproduce their recorded prediction.
  void replay(const json& event) {
    const auto kind = lifelong::event_kind_from_string(event.at("kind").get<std::string>());
    const auto f = lifelong::decode_floats(event.at("features").get<std::string>());
    const auto seq = event.at("seq").get<std::uint64_t>();
    if (seq != core_.last_seq() + 1) throw PayloadError("event log gap before event " + std::to_string(seq));
    const std::string tag = event.value("sample_id", "");
    switch (kind) {
      case lifelong::EventKind::teach: teach(f, event.at("category").get<std::string>(), tag); break;
      case lifelong::EventKind::ask: {
        auto r = ask(f, tag, 0.0);
        if (!event.at("predicted").is_null() && r.at("label") != event.at("predicted"))
          throw PayloadError("replayed ask " + std::to_string(seq) + " predicted a different label");
        break;
      }
      case lifelong::EventKind::correct:
        correct(event.at("corrects").get<std::uint64_t>(), event.at("category").get<std::string>());
        break;
    }
  }

  void set_journal(fs::path p) { journal_ = std::move(p); }
  void set_created(std::string c) { created_ = std::move(c); }

  const lifelong::Session& core() const { return core_; }

 private:
  static std::string now_iso() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  // Called with the session write lock held, so the feed order is the
  // mutation order.
  void publish(std::unique_lock<std::shared_mutex>&, json body) {
    const auto& e = core_.log().back();
    body["seq"] = e.seq;
    body["kind"] = lifelong::to_string(e.kind);
    body["session_id"] = id_;
    if (!e.sample_id.empty()) body["tag"] = e.sample_id;
    if (!journal_.empty()) {
      std::ofstream out(journal_, std::ios::app);
      out << lifelong::to_json(e, core_.support().categories(), true).dump() << '\n';
      if (!out) throw IoError("cannot append to " + journal_.string());
    }
    {
      std::lock_guard g(feed_mu_);
      feed_.push_back(std::move(body));
    }
    feed_cv_.notify_all();
  }

  std::string id_;
  std::shared_ptr<const Extractor> extractor_;
  lifelong::Session core_;
  std::string created_;
  fs::path journal_;
  mutable std::shared_mutex mu_;
  mutable std::mutex feed_mu_;
  mutable std::condition_variable feed_cv_;
  std::vector<json> feed_;  // feed_[i] has seq i + 1
};

class TeachService {
 public:
  explicit TeachService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    if (!cfg_.data_dir.empty()) fs::create_directories(cfg_.data_dir / "sessions");
  }
  ~TeachService() { stop(); }

  const ServiceConfig& config() const { return cfg_; }

  json create_session(const json& req) {
    const std::string ckpt = req.value("checkpoint", cfg_.checkpoint.string());
    if (ckpt.empty()) throw InvalidCheckpoint("no checkpoint given and the service has no default");
    const std::string fusion = req.value("fusion", cfg_.fusion);
    const std::size_t k = req.value("k", cfg_.k);
    if (k < 1) throw InvalidArgument("k must be at least 1");
    auto ex = extractor(ckpt, fusion);
    std::string id = new_id();
    auto s = std::make_shared<LiveSession>(id, ex, k);
    if (!cfg_.data_dir.empty()) {
      auto dir = session_dir(id);
      fs::create_directories(dir);
      write_text(dir / "meta.json", s->meta().dump(2));
      s->set_journal(dir / "events.jsonl");
    }
    {
      std::lock_guard g(mu_);
      sessions_[id] = s;
    }
    return s->meta();
  }

  std::shared_ptr<LiveSession> session(const std::string& id) const {
    std::lock_guard g(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFound("no session '" + id + "'");
    return it->second;
  }

  json list() const {
    std::lock_guard g(mu_);
    json out = json::array();
    for (const auto& [id, s] : sessions_) out.push_back(s->meta());
    return out;
  }

  json teach(const std::string& id, const WireSample& w, const std::string& label) {
    auto s = session(id);
    if (label.empty()) throw InvalidArgument("teach needs a non-empty label");
    auto f = s->extractor().features(w);
    return s->teach(f, label, w.tag);
  }

  json ask(const std::string& id, const WireSample& w) {
    auto s = session(id);
    const auto t0 = std::chrono::steady_clock::now();
    auto f = s->extractor().features(w);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return s->ask(f, w.tag, ms);
  }

  json correct(const std::string& id, std::uint64_t event, const std::string& label) {
    if (label.empty()) throw InvalidArgument("correct needs a non-empty label");
    return session(id)->correct(event, label);
  }

  json state(const std::string& id) const { return session(id)->state(); }

  json save(const std::string& id) {
    if (cfg_.data_dir.empty()) throw StateError("service was started without a data directory");
    auto s = session(id);
    auto snap = s->snapshot();
    auto path = session_dir(id) / "snapshot.json";
    write_text(path, snap.dump());
    return {{"session_id", id}, {"path", path.string()}, {"last_event", snap["last_event"]}};
  }

  // Rebuilds a persisted session from its snapshot plus any journal events
  // recorded after it.
  json load(const std::string& id) {
    if (cfg_.data_dir.empty()) throw StateError("service was started without a data directory");
    {
      std::lock_guard g(mu_);
      if (sessions_.count(id)) throw Conflict("session '" + id + "' is already live");
    }
    const auto dir = session_dir(id);
    if (!fs::exists(dir / "meta.json")) throw NotFound("no persisted session '" + id + "'");
    const json meta = json::parse(read_text(dir / "meta.json"));
    std::vector<json> events;
    std::uint64_t covered = 0;
    if (fs::exists(dir / "snapshot.json")) {
      json snap = json::parse(read_text(dir / "snapshot.json"));
      for (auto& e : snap.at("log")) events.push_back(e);
      covered = snap.at("last_event").get<std::uint64_t>();
    }
    if (fs::exists(dir / "events.jsonl")) {
      std::ifstream in(dir / "events.jsonl");
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        json e = json::parse(line);
        if (e.at("seq").get<std::uint64_t>() > covered) {
          events.push_back(e);
          covered = e.at("seq").get<std::uint64_t>();
        }
      }
    }
    auto ex = extractor(meta.at("checkpoint").get<std::string>(), meta.at("fusion").get<std::string>());
    if (ex->fingerprint != meta.at("fingerprint").get<std::string>())
      throw IncompatibleCheckpoint("checkpoint changed since session '" + id + "' was created");
    auto s = std::make_shared<LiveSession>(id, ex, meta.at("k").get<std::size_t>());
    s->set_created(meta.value("created", ""));
    for (const auto& e : events) s->replay(e);
    s->set_journal(dir / "events.jsonl");
    {
      std::lock_guard g(mu_);
      sessions_[id] = s;
    }
    return s->state();
  }

  void stop() {
    stopping_ = true;
    std::lock_guard g(mu_);
    for (auto& [id, s] : sessions_) s->wake();
  }
  bool stopping() const { return stopping_; }

 private:
  fs::path session_dir(const std::string& id) const { return cfg_.data_dir / "sessions" / id; }

  std::shared_ptr<const Extractor> extractor(const std::string& path, const std::string& fusion) {
    const std::string key = path + "|" + fusion;
    std::lock_guard g(ex_mu_);
    auto it = extractors_.find(key);
    if (it != extractors_.end()) return it->second;
    auto ex = load_extractor(path, fusion, cfg_.depth);
    extractors_[key] = ex;
    return ex;
  }

  std::string new_id() {
    static thread_local std::mt19937_64 rng(std::random_device{}());
    std::lock_guard g(mu_);
    for (;;) {
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
      std::string id(buf);
      if (!sessions_.count(id) && (cfg_.data_dir.empty() || !fs::exists(session_dir(id)))) return id;
    }
  }

  ServiceConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<LiveSession>> sessions_;
  std::mutex ex_mu_;
  std::map<std::string, std::shared_ptr<const Extractor>> extractors_;
  std::atomic<bool> stopping_{false};
};

// ---------------------------------------------------------------------------
// HTTP

inline int http_status(const std::string& code) {
  static const std::map<std::string, int> table = {
      {"invalid_argument", 400},       {"payload_error", 400}, {"invalid_checkpoint", 400},
      {"empty_input", 400},            {"not_found", 404},     {"conflict", 409},
      {"protocol_error", 409},         {"state_error", 409},   {"unsupported_regime", 422},
      {"incompatible_checkpoint", 422}};
  auto it = table.find(code);
  return it == table.end() ? 500 : it->second;
}

inline json error_envelope(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

inline void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

// Body as JSON, or multipart/form-data with file parts "rgb" and "depth" and
// text parts for the other fields.
inline json request_body(const httplib::Request& req) {
  if (req.is_multipart_form_data()) {
    json j = json::object();
    for (const auto& [name, part] : req.files) {
      if (name == "rgb" || name == "depth")
        j[name] = base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(part.content.data()), part.content.size()));
      else
        j[name] = part.content;
    }
    if (j.contains("event") && j["event"].is_string()) j["event"] = std::stoull(j["event"].get<std::string>());
    if (j.contains("k") && j["k"].is_string()) j["k"] = std::stoull(j["k"].get<std::string>());
    return j;
  }
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw PayloadError(std::string("request body is not valid JSON: ") + e.what());
  }
}

template <class F>
void guarded(httplib::Response& res, int ok_status, F&& fn) {
  try {
    reply(res, ok_status, fn());
  } catch (const Error& e) {
    reply(res, http_status(e.code()), error_envelope(e.code(), e.what()));
  } catch (const json::exception& e) {
    reply(res, 400, error_envelope("payload_error", e.what()));
  } catch (const std::exception& e) {
    reply(res, 500, error_envelope("internal", e.what()));
  }
}

inline std::string sse_frame(const json& ev) {
  return "id: " + std::to_string(ev.at("seq").get<std::uint64_t>()) + "\nevent: " + ev.at("kind").get<std::string>() +
         "\ndata: " + ev.dump() + "\n\n";
}

// Routes:
//   GET  /health
//   GET  /sessions                     POST /sessions
//   POST /sessions/load                {session_id}
//   POST /sessions/{id}/teach          {rgb, depth, encoding?, tag?, label}
//   POST /sessions/{id}/ask            {rgb, depth, encoding?, tag?}
//   POST /sessions/{id}/correct        {event, label}
//   GET  /sessions/{id}/state
//   GET  /sessions/{id}/events         SSE; ?since=N or Last-Event-ID; ?format=json for a one-shot list
//   POST /sessions/{id}/save
inline void mount(httplib::Server& srv, TeachService& svc, std::chrono::milliseconds keepalive = std::chrono::seconds(15)) {
  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"status", "ok"}}); });
  srv.Get("/sessions", [&](const httplib::Request&, httplib::Response& res) {
    guarded(res, 200, [&] { return json{{"sessions", svc.list()}}; });
  });
  srv.Post("/sessions", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, 201, [&] { return svc.create_session(request_body(req)); });
  });
  srv.Post("/sessions/load", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, 200, [&] { return svc.load(request_body(req).at("session_id").get<std::string>()); });
  });
  srv.Post(R"(/sessions/([0-9a-f]+)/teach)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, 200, [&] {
      auto body = request_body(req);
      if (!body.contains("label") || !body["label"].is_string()) throw InvalidArgument("teach needs a string 'label'");
      return svc.teach(req.matches[1], sample_from_json(body), body["label"].get<std::string>());
    });
  });
  srv.Post(R"(/sessions/([0-9a-f]+)/ask)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, 200, [&] { return svc.ask(req.matches[1], sample_from_json(request_body(req))); });
  });
  srv.Post(R"(/sessions/([0-9a-f]+)/correct)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, 200, [&] {
      auto body = request_body(req);
      if (!body.contains("event") || !body["event"].is_number_unsigned())
        throw InvalidArgument("correct needs the numeric ask 'event' id");
      if (!body.contains("label") || !body["label"].is_string()) throw InvalidArgument("correct needs a string 'label'");
      return svc.correct(req.matches[1], body["event"].get<std::uint64_t>(), body["label"].get<std::string>());
    });
  });
  srv.Get(R"(/sessions/([0-9a-f]+)/state)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, 200, [&] { return svc.state(req.matches[1]); });
  });
  srv.Post(R"(/sessions/([0-9a-f]+)/save)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, 200, [&] { return svc.save(req.matches[1]); });
  });
  srv.Get(R"(/sessions/([0-9a-f]+)/events)", [&svc, keepalive](const httplib::Request& req, httplib::Response& res) {
    std::shared_ptr<LiveSession> s;
    std::uint64_t since = 0;
    try {
      s = svc.session(req.matches[1]);
      if (req.has_param("since")) since = std::stoull(req.get_param_value("since"));
      else if (req.has_header("Last-Event-ID")) since = std::stoull(req.get_header_value("Last-Event-ID"));
    } catch (const Error& e) {
      reply(res, http_status(e.code()), error_envelope(e.code(), e.what()));
      return;
    } catch (const std::exception& e) {
      reply(res, 400, error_envelope("invalid_argument", std::string("bad event cursor: ") + e.what()));
      return;
    }
    if (req.get_param_value("format") == "json") {
      reply(res, 200, json{{"events", s->events_since(since, std::chrono::milliseconds(0))}});
      return;
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [s, since, &svc, keepalive](std::size_t, httplib::DataSink& sink) mutable {
      if (svc.stopping()) return false;
      auto evs = s->events_since(since, keepalive, [&svc] { return svc.stopping(); });
      std::string out;
      for (const auto& ev : evs) {
        out += sse_frame(ev);
        since = ev.at("seq").get<std::uint64_t>();
      }
      if (out.empty()) out = ": keepalive\n\n";
      if (!sink.write(out.data(), out.size())) return false;
      return !svc.stopping();
    });
  });
}

}  // namespace rgbdvit::teachd
