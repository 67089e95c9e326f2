#include <doctest.h>

#include <sys/socket.h>
#include <unistd.h>

#include <cmath>
#include <random>
#include <thread>

#include "magpath/pipeline.hpp"
#include "magpath/telepath.hpp"

using namespace magpath;

namespace {

std::shared_ptr<ServerModels> tiny_models() {
  EncoderConfig ec;
  ec.channels = {4, 8};
  ec.strides = {2, 2};
  auto m = std::make_shared<ServerModels>();
  m->tiling.patch20 = 64;
  const Encoder teacher = make_teacher(ec, 3);
  GLTransConfig gc;
  gc.d_in = 8;
  gc.d_model = 8;
  gc.heads = 2;
  gc.layers = 1;
  m->encoders.emplace(20, teacher);
  m->encoders.emplace(5, make_student(teacher));
  m->classifiers.emplace(20, GLTrans(gc, 4));
  m->classifiers.emplace(5, GLTrans(gc, 5));
  return m;
}

SyntheticSlide small_slide(int label, int id) {
  SynthParams p;
  p.base_size = 256;
  return generate_slide(label, id, slide_seed(8, id), p, id);
}

Frame random_frame(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> type(1, 5), byte(0, 255), len(0, 300);
  Frame f;
  f.type = static_cast<FrameType>(type(rng));
  f.payload.resize(static_cast<std::size_t>(len(rng)));
  for (auto& b : f.payload) b = static_cast<std::uint8_t>(byte(rng));
  return f;
}

void write_frame(int fd, const Frame& f) {
  const auto bytes = encode_frame(f);
  REQUIRE(::write(fd, bytes.data(), bytes.size()) == static_cast<ssize_t>(bytes.size()));
}

Frame read_frame(int fd) {
  std::vector<std::uint8_t> buf(kFrameHeaderSize);
  auto fill = [&](std::size_t from, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const ssize_t r = ::read(fd, buf.data() + from + got, n - got);
      REQUIRE(r > 0);
      got += static_cast<std::size_t>(r);
    }
  };
  fill(0, kFrameHeaderSize);
  const std::uint32_t len = (std::uint32_t{buf[6]} << 24) | (std::uint32_t{buf[7]} << 16) |
                            (std::uint32_t{buf[8]} << 8) | buf[9];
  buf.resize(kFrameOverhead + len);
  fill(kFrameHeaderSize, len + 4);
  return decode_frame(buf);
}

}  // namespace

TEST_CASE("frame codec") {
  const Frame hello{FrameType::Hello, {}};
  const auto bytes = encode_frame(hello);
  CHECK(bytes.size() == kFrameOverhead);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MAGT");
  CHECK(bytes[4] == kProtocolVersion);
  CHECK(bytes[5] == 1);
  CHECK(decode_frame(bytes) == hello);

  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Frame f = random_frame(rng);
    CHECK(decode_frame(encode_frame(f)) == f);
  }

  SUBCASE("every single-byte corruption is rejected") {
    std::uniform_int_distribution<int> flip(1, 255);
    for (int i = 0; i < 50; ++i) {
      const auto good = encode_frame(random_frame(rng));
      for (std::size_t pos = 0; pos < good.size(); ++pos) {
        auto bad = good;
        bad[pos] ^= static_cast<std::uint8_t>(flip(rng));
        CHECK_THROWS_AS(decode_frame(bad), ProtocolError);
      }
    }
  }
  SUBCASE("error kinds") {
    auto b = encode_frame({FrameType::Result, {1, 2, 3}});
    auto magic = b;
    magic[0] = 'X';
    CHECK_THROWS_AS(decode_frame(magic), BadMagic);
    auto version = b;
    version[4] = 2;
    CHECK_THROWS_AS(decode_frame(version), VersionMismatch);
    auto payload = b;
    payload[kFrameHeaderSize] ^= 1;
    CHECK_THROWS_AS(decode_frame(payload), ChecksumError);
    auto truncated = b;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_frame(truncated), ProtocolError);
    CHECK_THROWS_AS(decode_frame({}), ProtocolError);
    CHECK_THROWS_AS(encode_frame({static_cast<FrameType>(9), {}}), ContractError);
  }
}

TEST_CASE("meta and result payloads") {
  SlideMeta m;
  m.magnification = 5;
  m.slide_id = 12;
  m.truth = 1;
  m.height = 4;
  m.width = 6;
  m.total_bytes = 72;
  m.chunk_count = 2;
  CHECK(decode_meta(encode_meta(m)) == m);
  CHECK(encode_meta(m).size() == 30);
  SlideMeta bad = m;
  bad.total_bytes = 71;
  CHECK_THROWS_AS(decode_meta(encode_meta(bad)), ProtocolError);
  auto truncated = encode_meta(m);
  truncated.pop_back();
  CHECK_THROWS_AS(decode_meta(truncated), ProtocolError);

  DiagnosisResult r;
  r.session_id = 99;
  r.label = 1;
  r.probs = {0.25, 0.75};
  r.heatmap_pgm = "P5\n1 1\n255\n\x7f";
  r.timing = {0.5, 0.25, 0.75, 1234, 20};
  const DiagnosisResult back = decode_result(encode_result(r));
  CHECK(back.session_id == 99);
  CHECK(back.label == 1);
  CHECK(back.probs == r.probs);
  CHECK(back.heatmap_pgm == r.heatmap_pgm);
  CHECK(back.timing.transfer_s == 0.5);
  CHECK(back.timing.total_s == 0.75);
  CHECK(back.timing.bytes == 1234);
  CHECK(back.timing.magnification == 20);
}

TEST_CASE("server rejects out-of-order chunks with an ERROR frame") {
  int sv[2];
  REQUIRE(::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) == 0);
  const auto models = tiny_models();
  std::string error;
  std::thread server([&] {
    try {
      serve_connection(sv[1], *models, ChannelModel{}, 7);
    } catch (const ProtocolError& e) {
      error = e.what();
    }
  });
  write_frame(sv[0], {FrameType::Hello, {}});
  CHECK(read_frame(sv[0]).type == FrameType::Hello);
  SlideMeta meta;
  meta.height = 2;
  meta.width = 2;
  meta.total_bytes = 12;
  meta.chunk_count = 2;
  write_frame(sv[0], {FrameType::SlideMeta, encode_meta(meta)});
  write_frame(sv[0], {FrameType::SlideChunk, {0, 0, 0, 1, 9, 9, 9, 9, 9, 9}});
  const Frame reply = read_frame(sv[0]);
  server.join();
  ::close(sv[0]);
  ::close(sv[1]);
  CHECK(reply.type == FrameType::Error);
  const std::string text(reply.payload.begin(), reply.payload.end());
  CHECK(text.find("chunk out of order: expected index 0, got 1") != std::string::npos);
  CHECK(error == text);
}

TEST_CASE("loopback sessions") {
  const auto models = tiny_models();
  const std::uint64_t checksum = models->checksum();
  ChannelModel channel;  // simulated, 200 Mbps, 10 ms
  Server server(Endpoint{"127.0.0.1", 0}, models, channel);
  REQUIRE(server.endpoint().port != 0);

  std::vector<SyntheticSlide> slides;
  for (int i = 0; i < 4; ++i) slides.push_back(small_slide(i % 2, i));

  std::size_t sessions = 0;
  for (const auto& s : slides) {
    for (int mag : {20, 5}) {
      const Raster raster = slide_payload(s, mag);
      SendOptions opts;
      opts.truth = s.label;
      opts.slide_id = s.slide_id;
      opts.chunk_size = 4096;
      const SendResult small_chunks = send_raster(server.endpoint(), raster, mag, opts);
      opts.chunk_size = kDefaultChunkSize;
      const SendResult big_chunks = send_raster(server.endpoint(), raster, mag, opts);
      sessions += 2;

      CHECK(small_chunks.diagnosis.probs == big_chunks.diagnosis.probs);
      CHECK(small_chunks.diagnosis.heatmap_pgm == big_chunks.diagnosis.heatmap_pgm);

      // Same answer as running the server-side work in process.
      SlideMeta meta;
      meta.magnification = mag;
      meta.height = static_cast<std::uint32_t>(raster.height);
      meta.width = static_cast<std::uint32_t>(raster.width);
      meta.total_bytes = raster.pixels.size();
      const DiagnosisResult direct = diagnose(*models, meta, raster.pixels);
      CHECK(big_chunks.diagnosis.probs == direct.probs);
      CHECK(big_chunks.diagnosis.label == direct.label);

      for (const auto* r : {&small_chunks, &big_chunks}) {
        const std::size_t chunk = r == &small_chunks ? 4096 : kDefaultChunkSize;
        const std::uint64_t bytes = upload_bytes(raster.pixels.size(), chunk);
        CHECK(r->timing.bytes == bytes);
        CHECK(r->timing.transfer_s == static_cast<double>(bytes) * 8.0 / channel.bandwidth_bps + channel.latency_s);
        CHECK(r->timing.total_s == r->timing.transfer_s + r->diagnosis.timing.inference_s);
        CHECK(r->diagnosis.timing.transfer_s == r->timing.transfer_s);
      }
    }
  }
  server.wait_for_sessions(sessions);
  const auto logs = server.logs();
  REQUIRE(logs.size() == sessions);
  for (std::size_t i = 0; i < logs.size(); ++i) {
    CHECK(logs[i].session_id == i + 1);
    CHECK(logs[i].truth == slides[i / 4].label);
  }
  CHECK(models->checksum() == checksum);

  const auto report = session_report(logs);
  REQUIRE(report.size() == 2);
  CHECK(report[0].magnification == 5);
  CHECK(report[1].magnification == 20);
  CHECK(report[0].sessions == 8);
  CHECK(report[0].mean_bytes < report[1].mean_bytes);
  CHECK(report[0].mean_transfer_s < report[1].mean_transfer_s);
  CHECK(std::isfinite(report[0].auc));

  SUBCASE("missing model is reported by the server") {
    SendOptions opts;
    CHECK_THROWS_AS(send_raster(server.endpoint(), slide_payload(slides[0], 10), 10, opts), ProtocolError);
  }
  server.stop();
}

TEST_CASE("network failures carry their stage") {
  int port = 0;
  {
    Server s(Endpoint{"127.0.0.1", 0}, tiny_models(), ChannelModel{});
    port = s.endpoint().port;
  }
  try {
    send_raster(Endpoint{"127.0.0.1", static_cast<std::uint16_t>(port)}, slide_payload(small_slide(0, 0), 5), 5, {});
    FAIL("expected a NetworkError");
  } catch (const NetworkError& e) {
    CHECK(e.stage == "connect");
  }
  CHECK_THROWS_AS(Endpoint::parse("localhost"), ConfigError);
  CHECK_THROWS_AS(Endpoint::parse("localhost:99999"), ConfigError);
  const Endpoint ep = Endpoint::parse("10.0.0.1:5055");
  CHECK(ep.host == "10.0.0.1");
  CHECK(ep.port == 5055);
  CHECK(ep.str() == "10.0.0.1:5055");
}

TEST_CASE("session logs") {
  std::vector<SessionLog> logs{{1, 20, 1000, 0.5, 0.1, 1, 0.9, 1}, {2, 5, 100, 0.05, 0.01, 0, 0.2, 0},
                               {3, 5, 120, 0.07, 0.03, 1, 0.8, 1}};
  const auto parsed = parse_session_log_csv(session_log_csv(logs));
  REQUIRE(parsed.size() == 3);
  CHECK(parsed[1].bytes == 100);
  CHECK(parsed[2].prob == doctest::Approx(0.8));
  CHECK(session_log_csv(logs).rfind("session_id,magnification,bytes,transfer_s,inference_s,label,prob,truth\n", 0) == 0);

  const auto report = session_report(logs);
  REQUIRE(report.size() == 2);
  CHECK(report[0].magnification == 5);
  CHECK(report[0].mean_bytes == 110.0);
  CHECK(report[0].mean_transfer_s == doctest::Approx(0.06));
  CHECK(report[0].auc == 1.0);
  CHECK(std::isnan(report[1].auc));
  CHECK_THROWS_AS(session_report({}), InputError);
  CHECK_THROWS_AS(parse_session_log_csv("1,2,3\n"), InputError);
}

TEST_CASE("channel model") {
  ChannelModel c;
  c.bandwidth_bps = 200e6;
  c.latency_s = 0.0;
  CHECK(c.transfer_seconds(100'000'000) == 4.0);
  c.latency_s = 0.01;
  const double t20 = c.transfer_seconds(1024 * 1024 * 3) - c.latency_s;
  const double t5 = c.transfer_seconds(256 * 256 * 3) - c.latency_s;
  CHECK(t5 / t20 == doctest::Approx(1.0 / 16.0).epsilon(1e-12));

  c.jitter_seed = 5;
  CHECK(c.transfer_seconds(1000, 3) == c.transfer_seconds(1000, 3));
  bool varies = false;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const double t = c.transfer_seconds(1000, s);
    const double base = 1000 * 8 / c.bandwidth_bps;
    CHECK(t - base >= c.latency_s * (1 - c.jitter_fraction) - 1e-15);
    CHECK(t - base <= c.latency_s * (1 + c.jitter_fraction) + 1e-15);
    varies = varies || t != c.transfer_seconds(1000, 0);
  }
  CHECK(varies);

  ChannelModel bad;
  bad.bandwidth_bps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ChannelModel{};
  bad.latency_s = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("single-session report equals the session") {
  const SessionLog one{4, 10, 777, 0.25, 0.5, 1, 0.6, 1};
  const auto rows = session_report({one});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].magnification == 10);
  CHECK(rows[0].sessions == 1);
  CHECK(rows[0].mean_bytes == 777.0);
  CHECK(rows[0].mean_transfer_s == 0.25);
  CHECK(rows[0].mean_inference_s == 0.5);
}
