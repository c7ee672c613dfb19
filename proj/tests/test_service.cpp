#include <gtest/gtest.h>

#include <filesystem>

#include "barstyle/service.hpp"
#include "support.hpp"

using namespace barstyle;

namespace {

VaeConfig tiny_vae() {
  VaeConfig c = VaeConfig::toy(Vocab(16).size(), 16);
  for (StackConfig* s : {&c.encoder, &c.decoder}) {
    s->layers = 1;
    s->heads = 2;
    s->d_model = 16;
    s->d_embed = 16;
    s->d_ff = 32;
  }
  c.d_z = 4;
  c.d_attr = 4;
  return c;
}

std::string midi_of(const QuantizedScore& q) {
  auto bytes = write_midi(q);
  return {bytes.begin(), bytes.end()};
}

std::string random_midi(int bars, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return midi_of(testsupport::random_score(rng, bars, 16, 0.2));
}

/// One 3/4 bar with a single quarter note.
std::string waltz_midi() {
  std::string track = {0x00, '\xFF', 0x58, 0x04, 0x03, 0x02, 0x18, 0x08,  // 3/4
                       0x00, '\x90', 0x3C, 0x40, '\x83', 0x60, '\x80', 0x3C, 0x00, 0x00, '\xFF', 0x2F, 0x00};
  std::string out = "MThd";
  out += std::string{0, 0, 0, 6, 0, 0, 0, 1, 0x01, '\xE0'};
  out += "MTrk";
  out += std::string{0, 0, 0, static_cast<char>(track.size())};
  return out + track;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    StyleVae m(tiny_vae(), 11);
    ckpt_a = (dir.path() / "ckpt_a").string();
    ckpt_b = (dir.path() / "ckpt_b").string();
    m.save(ckpt_a, 5);
    StyleVae(tiny_vae(), 12).save(ckpt_b, 9);
    cfg.store_dir = (dir.path() / "store").string();
    cfg.sampling.max_bar_tokens = 32;
    cfg.window = 4;
  }

  std::unique_ptr<StyleService> open() { return std::make_unique<StyleService>(cfg); }

  testsupport::TempDir dir;
  ServiceConfig cfg;
  std::string ckpt_a, ckpt_b;
};

}  // namespace

TEST_F(ServiceTest, UploadsAndReturnsBarRows) {
  auto svc = open();
  HttpFrontend http(*svc);
  int port = http.start();
  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Post("/pieces", random_midi(8, 1), "application/octet-stream");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  auto id = json::parse(res->body)["id"].get<std::string>();
  auto got = cli.Get("/pieces/" + id);
  ASSERT_EQ(got->status, 200);
  auto body = json::parse(got->body);
  EXPECT_EQ(body["attributes"].size(), 8u);
  EXPECT_EQ(body["bars"], 8);
  EXPECT_FALSE(body["latents_cached"].get<bool>());
}

TEST_F(ServiceTest, RejectsBadUploads) {
  auto svc = open();
  HttpFrontend http(*svc);
  httplib::Client cli("127.0.0.1", http.start());
  EXPECT_EQ(cli.Post("/pieces", "not a midi file", "application/octet-stream")->status, 400);
  EXPECT_EQ(cli.Post("/pieces", waltz_midi(), "application/octet-stream")->status, 422);
  EXPECT_EQ(cli.Get("/pieces/p999999")->status, 404);
  EXPECT_EQ(cli.Get("/transfers/t999999")->status, 404);
}

TEST_F(ServiceTest, IdenticalUploadsGetNewIds) {
  auto svc = open();
  auto bytes = random_midi(2, 3);
  auto a = svc->upload_piece(bytes), b = svc->upload_piece(bytes);
  EXPECT_NE(a.id, b.id);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST_F(ServiceTest, PianorollOfOneNotePiece) {
  auto svc = open();
  HttpFrontend http(*svc);
  httplib::Client cli("127.0.0.1", http.start());
  QuantizedScore q;
  q.bars.resize(1);
  q.bars[0].notes.push_back({4, 64, 10, 2});
  auto id = json::parse(cli.Post("/pieces", midi_of(q), "application/octet-stream")->body)["id"].get<std::string>();
  auto res = cli.Get("/pieces/" + id + "/pianoroll");
  ASSERT_EQ(res->status, 200);
  auto body = json::parse(res->body);
  ASSERT_EQ(body["notes"].size(), 1u);
  EXPECT_EQ(body["notes"][0]["sub_beat"], 4);
  EXPECT_EQ(body["notes"][0]["pitch"], 64);
  EXPECT_EQ(body["notes"][0]["duration"], 2);
  EXPECT_EQ(body["notes"][0]["velocity"], 10);
  EXPECT_EQ(body["attributes"].size(), 1u);
  EXPECT_EQ(cli.Get("/pieces/p424242/pianoroll")->status, 404);
}

TEST_F(ServiceTest, TransferNeedsCheckpoint) {
  auto svc = open();
  HttpFrontend http(*svc);
  httplib::Client cli("127.0.0.1", http.start());
  auto id = svc->upload_piece(random_midi(2, 4)).id;
  auto res = cli.Post("/transfers", json{{"piece_id", id}}.dump(), "application/json");
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(cli.Post("/admin/checkpoint", json{{"path", "/nonexistent/ckpt"}}.dump(), "application/json")->status, 404);
  EXPECT_EQ(cli.Post("/admin/checkpoint", json{{"path", cfg.store_dir}}.dump(), "application/json")->status, 422);
  EXPECT_EQ(cli.Post("/admin/checkpoint", "{", "application/json")->status, 400);
  auto ok = cli.Post("/admin/checkpoint", json{{"path", ckpt_a}}.dump(), "application/json");
  ASSERT_EQ(ok->status, 200);
  EXPECT_EQ(json::parse(ok->body)["step"], 5);
  EXPECT_EQ(cli.Post("/transfers", json{{"piece_id", id}}.dump(), "application/json")->status, 202);
}

TEST_F(ServiceTest, OverrideValidation) {
  auto svc = open();
  svc->load_checkpoint(ckpt_a);
  HttpFrontend http(*svc);
  httplib::Client cli("127.0.0.1", http.start());
  auto id = svc->upload_piece(random_midi(3, 5)).id;
  auto post = [&](const json& b) { return cli.Post("/transfers", b.dump(), "application/json")->status; };
  EXPECT_EQ(post({{"piece_id", id}, {"rhythm", {"+1", "+1"}}}), 422);
  EXPECT_EQ(post({{"piece_id", id}, {"polyphony", "*2"}}), 422);
  EXPECT_EQ(post({{"piece_id", id}, {"rhythm", {1, "=2", true}}}), 422);
  EXPECT_EQ(post({{"piece_id", id}, {"tau", -1.0}}), 422);
  EXPECT_EQ(post({{"piece_id", "p000777"}}), 404);
  EXPECT_EQ(post({{"rhythm", "+1"}}), 400);
  EXPECT_EQ(post({{"piece_id", id}, {"rhythm", {"+1", "=0", 7}}, {"polyphony", "-2"}}), 202);
}

TEST_F(ServiceTest, TransferRoundTripOverHttp) {
  auto svc = open();
  svc->load_checkpoint(ckpt_a);
  HttpFrontend http(*svc);
  httplib::Client cli("127.0.0.1", http.start());
  auto piece = svc->upload_piece(random_midi(6, 6));
  auto res = cli.Post("/transfers", json{{"piece_id", piece.id}, {"rhythm", "=7"}, {"seed", 3}}.dump(), "application/json");
  ASSERT_EQ(res->status, 202);
  auto tid = json::parse(res->body)["id"].get<std::string>();
  auto done = svc->wait(tid);
  ASSERT_EQ(done.status, JobStatus::Done) << done.error;

  auto body = json::parse(cli.Get("/transfers/" + tid)->body);
  EXPECT_EQ(body["status"], "done");
  EXPECT_EQ(body["achieved"].size(), 6u);
  ASSERT_EQ(body["requested"].size(), 6u);
  for (const auto& r : body["requested"]) EXPECT_EQ(r["rhythm"], 7);

  auto roll = json::parse(cli.Get("/pieces/" + tid + "/pianoroll")->body);
  EXPECT_EQ(roll["kind"], "transfer");
  EXPECT_EQ(roll["requested"].size(), 6u);
  EXPECT_EQ(roll["achieved"].size(), 6u);

  auto midi = cli.Get("/transfers/" + tid + "/midi");
  ASSERT_EQ(midi->status, 200);
  EXPECT_EQ(midi->get_header_value("Content-Type"), "audio/midi");
  auto raw = parse_midi(std::span(reinterpret_cast<const std::uint8_t*>(midi->body.data()), midi->body.size()));
  EXPECT_EQ(quantize(raw).bars.size(), 6u);

  // latents are now cached for this snapshot; the source record is untouched
  auto after = json::parse(cli.Get("/pieces/" + piece.id)->body);
  EXPECT_TRUE(after["latents_cached"].get<bool>());
  EXPECT_EQ(after["tokens"].get<std::vector<int>>(), piece.tokens);
}

TEST_F(ServiceTest, JobsAreIndependentAndDeterministic) {
  cfg.workers = 2;
  auto svc = open();
  svc->load_checkpoint(ckpt_a);
  auto piece = svc->upload_piece(random_midi(4, 7));
  auto a = svc->request_transfer({{"piece_id", piece.id}});
  auto b = svc->request_transfer({{"piece_id", piece.id}});
  auto c = svc->request_transfer({{"piece_id", piece.id}, {"seed", a.sampling.seed}});
  EXPECT_NE(a.sampling.seed, b.sampling.seed);
  auto ra = svc->wait(a.id), rb = svc->wait(b.id), rc = svc->wait(c.id);
  ASSERT_EQ(ra.status, JobStatus::Done) << ra.error;
  ASSERT_EQ(rb.status, JobStatus::Done) << rb.error;
  ASSERT_EQ(rc.status, JobStatus::Done) << rc.error;
  EXPECT_EQ(ra.tokens, rc.tokens);
  EXPECT_EQ(svc->piece(piece.id).tokens, piece.tokens);
}

TEST_F(ServiceTest, QueuedJobsKeepTheirSnapshot) {
  auto svc = open();
  svc->load_checkpoint(ckpt_a);
  auto piece = svc->upload_piece(random_midi(4, 8));
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(svc->request_transfer({{"piece_id", piece.id}, {"seed", 1}}).id);
  svc->load_checkpoint(ckpt_b);
  auto late = svc->request_transfer({{"piece_id", piece.id}, {"seed", 1}});
  for (const auto& id : ids) {
    auto j = svc->wait(id);
    EXPECT_EQ(j.status, JobStatus::Done);
    EXPECT_EQ(j.checkpoint, ckpt_a);
  }
  auto j = svc->wait(late.id);
  EXPECT_EQ(j.checkpoint, ckpt_b);
  EXPECT_EQ(svc->status()["checkpoint"]["step"], 9);
}

TEST_F(ServiceTest, StoreSurvivesRestart) {
  std::string pid, tid;
  std::vector<int> tokens;
  {
    auto svc = open();
    svc->load_checkpoint(ckpt_a);
    auto p = svc->upload_piece(random_midi(3, 9), "demo.mid");
    pid = p.id;
    tid = svc->request_transfer({{"piece_id", pid}, {"seed", 4}}).id;
    tokens = svc->wait(tid).tokens;
  }
  auto svc = open();
  EXPECT_EQ(svc->piece(pid).source, "demo.mid");
  auto j = svc->job(tid);
  EXPECT_EQ(j.status, JobStatus::Done);
  EXPECT_EQ(j.tokens, tokens);
  EXPECT_NE(svc->upload_piece(random_midi(1, 2)).id, pid);
  EXPECT_FALSE(svc->status()["checkpoint"].is_object());
}
