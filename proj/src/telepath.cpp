#include "magpath/telepath.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "magpath/mag.hpp"
#include "magpath/metrics.hpp"

namespace magpath {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'M', 'A', 'G', 'T'};
constexpr std::size_t kMetaSize = 30;

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

// Big-endian writer/reader over byte vectors.
struct Writer {
  std::vector<std::uint8_t> out;
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
};

struct Reader {
  const std::vector<std::uint8_t>& in;
  std::size_t pos = 0;
  const char* what;
  void need(std::size_t n) const {
    if (in.size() - pos < n) throw ProtocolError(std::string(what) + ": payload truncated");
  }
  std::uint8_t u8() {
    need(1);
    return in[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | in[pos++];
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | in[pos++];
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void done() const {
    if (pos != in.size()) throw ProtocolError(std::string(what) + ": trailing bytes in payload");
  }
};

std::uint32_t frame_crc(const std::uint8_t* from, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in pieces for payloads beyond 4 GiB-1.
  while (n > 0) {
    const auto step = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, from, step);
    from += step;
    n -= step;
  }
  return static_cast<std::uint32_t>(c);
}

void check_header(const std::uint8_t* h) {
  if (!std::equal(kMagic.begin(), kMagic.end(), h)) throw BadMagic("frame: bad magic");
  if (h[4] != kProtocolVersion)
    throw VersionMismatch("frame: version " + std::to_string(h[4]) + ", expected " +
                          std::to_string(kProtocolVersion));
  if (h[5] < 1 || h[5] > 5) throw ProtocolError("frame: unknown type " + std::to_string(h[5]));
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

std::uint32_t header_length(const std::uint8_t* h) { return be32(h + 6); }

// Socket helpers. EOF and errno failures become NetworkError with a stage.
void write_all(int fd, const std::vector<std::uint8_t>& bytes, const std::string& stage) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw NetworkError(stage, std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

void read_exact(int fd, std::uint8_t* dst, std::size_t n, const std::string& stage) {
  std::size_t off = 0;
  while (off < n) {
    const ssize_t r = ::recv(fd, dst + off, n - off, 0);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw NetworkError(stage, std::strerror(errno));
    }
    if (r == 0) throw NetworkError(stage, "connection closed by peer");
    off += static_cast<std::size_t>(r);
  }
}

std::size_t send_frame(int fd, const Frame& f, const std::string& stage) {
  const auto bytes = encode_frame(f);
  write_all(fd, bytes, stage);
  return bytes.size();
}

// Returns the frame and its wire size.
std::pair<Frame, std::size_t> recv_frame(int fd, const std::string& stage) {
  std::vector<std::uint8_t> buf(kFrameHeaderSize);
  read_exact(fd, buf.data(), kFrameHeaderSize, stage);
  check_header(buf.data());
  const std::uint32_t len = header_length(buf.data());
  if (len > kMaxPayload) throw ProtocolError("frame: payload length exceeds limit");
  buf.resize(kFrameOverhead + len);
  read_exact(fd, buf.data() + kFrameHeaderSize, len + 4, stage);
  return {decode_frame(buf), buf.size()};
}

Frame error_frame(const std::string& message) {
  return {FrameType::Error, std::vector<std::uint8_t>(message.begin(), message.end())};
}

std::string frame_text(const Frame& f) { return {f.payload.begin(), f.payload.end()}; }

struct Fd {
  int fd = -1;
  explicit Fd(int f) : fd(f) {}
  ~Fd() {
    if (fd >= 0) ::close(fd);
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
};

sockaddr_in resolve(const Endpoint& ep, const std::string& stage) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res); rc != 0)
    throw NetworkError(stage, "cannot resolve " + ep.host + ": " + ::gai_strerror(rc));
  sockaddr_in addr{};
  std::memcpy(&addr, res->ai_addr, sizeof(addr));
  ::freeaddrinfo(res);
  addr.sin_port = htons(ep.port);
  return addr;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---- framing ---------------------------------------------------------------

std::vector<std::uint8_t> encode_frame(const Frame& frame) {
  const auto t = static_cast<std::uint8_t>(frame.type);
  if (t < 1 || t > 5) throw ContractError("encode_frame: invalid frame type");
  if (frame.payload.size() > kMaxPayload) throw ContractError("encode_frame: payload exceeds 2^31 bytes");
  Writer w;
  w.out.reserve(kFrameOverhead + frame.payload.size());
  w.bytes(kMagic.data(), kMagic.size());
  w.u8(kProtocolVersion);
  w.u8(t);
  w.u32(static_cast<std::uint32_t>(frame.payload.size()));
  w.bytes(frame.payload.data(), frame.payload.size());
  w.u32(frame_crc(w.out.data() + 5, w.out.size() - 5));
  return std::move(w.out);
}

Frame decode_frame(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kFrameOverhead) {
    if (bytes.size() >= 4 && !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw BadMagic("frame: bad magic");
    throw ProtocolError("frame: truncated (" + std::to_string(bytes.size()) + " bytes)");
  }
  check_header(bytes.data());
  const std::uint32_t len = header_length(bytes.data());
  if (len > kMaxPayload || bytes.size() != kFrameOverhead + len)
    throw ProtocolError("frame: length field " + std::to_string(len) + " does not match " +
                        std::to_string(bytes.size()) + " frame bytes");
  const std::size_t crc_at = kFrameHeaderSize + len;
  if (be32(bytes.data() + crc_at) != frame_crc(bytes.data() + 5, crc_at - 5)) throw ChecksumError("frame: CRC mismatch");
  Frame f;
  f.type = static_cast<FrameType>(bytes[5]);
  f.payload.assign(bytes.begin() + kFrameHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(crc_at));
  return f;
}

// ---- payloads --------------------------------------------------------------

std::vector<std::uint8_t> encode_meta(const SlideMeta& m) {
  if (m.magnification < 0 || m.magnification > 255) throw ContractError("meta: magnification out of range");
  if (m.truth < -1 || m.truth > 1) throw ContractError("meta: truth must be -1, 0 or 1");
  Writer w;
  w.u8(static_cast<std::uint8_t>(m.magnification));
  w.u32(static_cast<std::uint32_t>(m.slide_id));
  w.u8(static_cast<std::uint8_t>(m.truth + 1));
  w.u32(m.channels);
  w.u32(m.height);
  w.u32(m.width);
  w.u64(m.total_bytes);
  w.u32(m.chunk_count);
  return std::move(w.out);
}

SlideMeta decode_meta(const std::vector<std::uint8_t>& payload) {
  Reader r{payload, 0, "SLIDE_META"};
  SlideMeta m;
  m.magnification = r.u8();
  m.slide_id = static_cast<int>(r.u32());
  m.truth = static_cast<int>(r.u8()) - 1;
  m.channels = r.u32();
  m.height = r.u32();
  m.width = r.u32();
  m.total_bytes = r.u64();
  m.chunk_count = r.u32();
  r.done();
  if (m.truth > 1) throw ProtocolError("SLIDE_META: truth must be -1, 0 or 1");
  if (m.channels != 3) throw ProtocolError("SLIDE_META: expected 3 channels");
  if (m.height == 0 || m.width == 0) throw ProtocolError("SLIDE_META: empty image");
  if (m.total_bytes != std::uint64_t{m.channels} * m.height * m.width)
    throw ProtocolError("SLIDE_META: total bytes do not match dimensions");
  if (m.chunk_count == 0 || m.chunk_count > m.total_bytes)
    throw ProtocolError("SLIDE_META: chunk count must lie in [1, total bytes]");
  return m;
}

std::vector<std::uint8_t> encode_result(const DiagnosisResult& r) {
  Writer w;
  w.u64(r.session_id);
  w.u8(static_cast<std::uint8_t>(r.label));
  w.f64(r.probs[0]);
  w.f64(r.probs[1]);
  w.f64(r.timing.transfer_s);
  w.f64(r.timing.inference_s);
  w.f64(r.timing.total_s);
  w.u64(r.timing.bytes);
  w.u8(static_cast<std::uint8_t>(r.timing.magnification));
  w.u32(static_cast<std::uint32_t>(r.heatmap_pgm.size()));
  w.bytes(r.heatmap_pgm.data(), r.heatmap_pgm.size());
  return std::move(w.out);
}

DiagnosisResult decode_result(const std::vector<std::uint8_t>& payload) {
  Reader r{payload, 0, "RESULT"};
  DiagnosisResult d;
  d.session_id = r.u64();
  d.label = r.u8();
  d.probs[0] = r.f64();
  d.probs[1] = r.f64();
  d.timing.transfer_s = r.f64();
  d.timing.inference_s = r.f64();
  d.timing.total_s = r.f64();
  d.timing.bytes = r.u64();
  d.timing.magnification = r.u8();
  const std::uint32_t n = r.u32();
  r.need(n);
  d.heatmap_pgm.assign(payload.begin() + static_cast<std::ptrdiff_t>(r.pos),
                       payload.begin() + static_cast<std::ptrdiff_t>(r.pos + n));
  r.pos += n;
  r.done();
  return d;
}

// ---- session logs ----------------------------------------------------------

std::string session_log_csv(const std::vector<SessionLog>& logs) {
  std::string out = "session_id,magnification,bytes,transfer_s,inference_s,label,prob,truth\n";
  for (const auto& l : logs)
    out += std::to_string(l.session_id) + "," + std::to_string(l.magnification) + "," + std::to_string(l.bytes) +
           "," + fmt(l.transfer_s) + "," + fmt(l.inference_s) + "," + std::to_string(l.label) + "," + fmt(l.prob) +
           "," + std::to_string(l.truth) + "\n";
  return out;
}

std::vector<SessionLog> parse_session_log_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<SessionLog> logs;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("session_id,", 0) == 0) continue;
    }
    std::istringstream row(line);
    std::vector<std::string> f;
    std::string cell;
    while (std::getline(row, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw InputError("session log: expected 8 columns in '" + line + "'");
    try {
      SessionLog l;
      l.session_id = std::stoull(f[0]);
      l.magnification = std::stoi(f[1]);
      l.bytes = std::stoull(f[2]);
      l.transfer_s = std::stod(f[3]);
      l.inference_s = std::stod(f[4]);
      l.label = std::stoi(f[5]);
      l.prob = std::stod(f[6]);
      l.truth = std::stoi(f[7]);
      logs.push_back(l);
    } catch (const std::logic_error&) {
      throw InputError("session log: unparsable row '" + line + "'");
    }
  }
  return logs;
}

std::vector<SessionSummary> session_report(const std::vector<SessionLog>& logs) {
  if (logs.empty()) throw InputError("session_report: no sessions");
  std::map<int, std::vector<const SessionLog*>> by_mag;
  for (const auto& l : logs) by_mag[l.magnification].push_back(&l);
  std::vector<SessionSummary> rows;
  for (const auto& [mag, group] : by_mag) {
    SessionSummary s;
    s.magnification = mag;
    s.sessions = group.size();
    std::vector<double> probs;
    std::vector<int> truth;
    for (const SessionLog* l : group) {
      s.mean_bytes += static_cast<double>(l->bytes);
      s.mean_transfer_s += l->transfer_s;
      s.mean_inference_s += l->inference_s;
      if (l->truth >= 0) {
        probs.push_back(l->prob);
        truth.push_back(l->truth);
      }
    }
    const auto n = static_cast<double>(group.size());
    s.mean_bytes /= n;
    s.mean_transfer_s /= n;
    s.mean_inference_s /= n;
    try {
      s.auc = auc(probs, truth);
    } catch (const UndefinedMetric&) {
      s.auc = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(s);
  }
  return rows;
}

std::string session_report_csv(const std::vector<SessionSummary>& rows) {
  std::string out = "magnification,sessions,mean_bytes,mean_transfer_s,mean_inference_s,auc\n";
  for (const auto& r : rows)
    out += std::to_string(r.magnification) + "," + std::to_string(r.sessions) + "," + fmt(r.mean_bytes) + "," +
           fmt(r.mean_transfer_s) + "," + fmt(r.mean_inference_s) + "," + fmt(r.auc) + "\n";
  return out;
}

// ---- server ----------------------------------------------------------------

std::uint64_t ServerModels::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) { h = (h ^ v) * 1099511628211ull; };
  for (const auto& [mag, e] : encoders) {
    mix(static_cast<std::uint64_t>(mag));
    mix(e.params().checksum());
  }
  for (const auto& [mag, g] : classifiers) {
    mix(static_cast<std::uint64_t>(mag) + 1000);
    mix(g.params().checksum());
  }
  return h;
}

Raster slide_payload(const SyntheticSlide& slide, int magnification) { return to_raster(slide.level(magnification)); }

DiagnosisResult diagnose(const ServerModels& models, const SlideMeta& meta, const std::vector<std::uint8_t>& pixels) {
  const auto enc = models.encoders.find(meta.magnification);
  const auto glt = models.classifiers.find(meta.magnification);
  if (enc == models.encoders.end() || glt == models.classifiers.end())
    throw InputError("no model for " + std::to_string(meta.magnification) + "x");
  if (pixels.size() != meta.total_bytes) throw ProtocolError("upload size does not match SLIDE_META");
  Raster raster{meta.width, meta.height, meta.channels, pixels};
  const Tensor image = from_raster(raster);
  const std::size_t patch = models.tiling.patch_size(meta.magnification);
  const std::vector<GridCoord> cells = kept_cells(image, patch, models.tiling);
  if (cells.empty()) throw InputError("uploaded slide has no tissue patches");
  const Tensor emb = extract_embeddings(enc->second, tile(image, cells, patch));
  const PredictionOutput pred = glt->second.predict(emb);
  DiagnosisResult r;
  r.label = pred.label;
  r.probs = pred.probs;
  r.heatmap_pgm = render_heatmap(pred.scores, cells, meta.height / patch, meta.width / patch);
  return r;
}

SessionLog serve_connection(int fd, const ServerModels& models, const ChannelModel& channel,
                            std::uint64_t session_id) {
  const double t0 = now_s();
  std::uint64_t received = 0;
  try {
    auto [hello, n0] = recv_frame(fd, "hello");
    received += n0;
    if (hello.type != FrameType::Hello) throw ProtocolError("expected HELLO");
    Writer id;
    id.u64(session_id);
    send_frame(fd, {FrameType::Hello, id.out}, "hello");

    auto [meta_frame, n1] = recv_frame(fd, "meta");
    received += n1;
    if (meta_frame.type != FrameType::SlideMeta) throw ProtocolError("expected SLIDE_META");
    const SlideMeta meta = decode_meta(meta_frame.payload);

    const double upload_start = now_s();
    std::vector<std::uint8_t> pixels;
    pixels.reserve(meta.total_bytes);
    for (std::uint32_t expected = 0; expected < meta.chunk_count; ++expected) {
      auto [chunk, n] = recv_frame(fd, "upload");
      received += n;
      if (chunk.type != FrameType::SlideChunk) throw ProtocolError("expected SLIDE_CHUNK");
      Reader r{chunk.payload, 0, "SLIDE_CHUNK"};
      const std::uint32_t index = r.u32();
      if (index != expected)
        throw ProtocolError("chunk out of order: expected index " + std::to_string(expected) + ", got " +
                            std::to_string(index));
      if (pixels.size() + chunk.payload.size() - 4 > meta.total_bytes)
        throw ProtocolError("upload exceeds total bytes declared in SLIDE_META");
      pixels.insert(pixels.end(), chunk.payload.begin() + 4, chunk.payload.end());
    }
    if (pixels.size() != meta.total_bytes) throw ProtocolError("upload shorter than declared in SLIDE_META");
    const double upload_end = now_s();

    DiagnosisResult result = diagnose(models, meta, pixels);
    const double inference = now_s() - upload_end;
    result.session_id = session_id;
    result.timing.bytes = received;
    result.timing.magnification = meta.magnification;
    result.timing.inference_s = inference;
    if (channel.mode == ChannelMode::Simulated) {
      result.timing.transfer_s = channel.transfer_seconds(received, session_id);
      result.timing.total_s = result.timing.transfer_s + inference;
    } else {
      result.timing.transfer_s = upload_end - upload_start;
      result.timing.total_s = now_s() - t0;
    }
    send_frame(fd, {FrameType::Result, encode_result(result)}, "result");

    SessionLog log;
    log.session_id = session_id;
    log.magnification = meta.magnification;
    log.bytes = received;
    log.transfer_s = result.timing.transfer_s;
    log.inference_s = inference;
    log.label = result.label;
    log.prob = result.probs[1];
    log.truth = meta.truth;
    return log;
  } catch (const NetworkError&) {
    throw;
  } catch (const std::exception& e) {
    // Protocol or input problem: tell the client, then give up on the session.
    try {
      send_frame(fd, error_frame(e.what()), "error");
    } catch (const NetworkError&) {
    }
    throw;
  }
}

Endpoint Endpoint::parse(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size())
    throw ConfigError("endpoint '" + text + "' is not host:port");
  Endpoint ep;
  ep.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  if (port.find_first_not_of("0123456789") != std::string::npos || port.size() > 5 || std::stoul(port) > 65535)
    throw ConfigError("endpoint '" + text + "' has an invalid port");
  ep.port = static_cast<std::uint16_t>(std::stoul(port));
  return ep;
}

std::string Endpoint::str() const { return host + ":" + std::to_string(port); }

Server::Server(Endpoint endpoint, std::shared_ptr<const ServerModels> models, ChannelModel channel,
               std::filesystem::path log_dir)
    : endpoint_(std::move(endpoint)), models_(std::move(models)), channel_(channel), log_dir_(std::move(log_dir)) {
  if (!models_) throw ContractError("Server: models required");
  channel_.validate();
  if (!log_dir_.empty()) std::filesystem::create_directories(log_dir_);
  const sockaddr_in addr = resolve(endpoint_, "bind");
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw NetworkError("bind", std::strerror(errno));
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 64) < 0) {
    const std::string err = std::strerror(errno);
    ::close(listen_fd_);
    throw NetworkError("bind", endpoint_.str() + ": " + err);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  endpoint_.port = ntohs(bound.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

Server::~Server() { stop(); }

void Server::accept_loop() {
  while (running_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (!running_) break;
      if (errno == EINTR || errno == ECONNABORTED) continue;
      break;
    }
    const std::uint64_t id = next_session_++;
    std::lock_guard lock(mutex_);
    workers_.emplace_back([this, fd, id] {
      Fd guard(fd);
      std::optional<SessionLog> log;
      try {
        log = serve_connection(fd, *models_, channel_, id);
      } catch (const std::exception&) {
        // The client already got an ERROR frame when the socket allowed it.
      }
      if (log && !log_dir_.empty()) {
        char name[32];
        std::snprintf(name, sizeof name, "session_%06llu.csv", static_cast<unsigned long long>(id));
        std::ofstream(log_dir_ / name) << session_log_csv({*log});
      }
      std::lock_guard inner(mutex_);
      if (log) logs_[id] = *log;
      ++finished_;
      finished_cv_.notify_all();
    });
  }
}

void Server::wait_for_sessions(std::size_t count) {
  std::unique_lock lock(mutex_);
  finished_cv_.wait(lock, [&] { return finished_ >= count; });
}

std::vector<SessionLog> Server::logs() const {
  std::lock_guard lock(mutex_);
  std::vector<SessionLog> out;
  for (const auto& [id, l] : logs_) out.push_back(l);
  return out;
}

void Server::stop() {
  if (running_.exchange(false)) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
  }
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(mutex_);
    workers.swap(workers_);
  }
  for (auto& t : workers)
    if (t.joinable()) t.join();
}

// ---- client ----------------------------------------------------------------

std::uint64_t upload_bytes(std::uint64_t payload_bytes, std::size_t chunk_size) {
  if (chunk_size == 0) throw ConfigError("chunk size must be positive");
  const std::uint64_t chunks = (payload_bytes + chunk_size - 1) / chunk_size;
  return kFrameOverhead + (kFrameOverhead + kMetaSize) + chunks * (kFrameOverhead + 4) + payload_bytes;
}

SendResult send_raster(const Endpoint& endpoint, const Raster& image, int magnification, const SendOptions& opts) {
  opts.channel.validate();
  if (opts.chunk_size == 0 || opts.chunk_size > kMaxPayload - 4) throw ConfigError("chunk size out of range");
  if (image.channels != 3 || image.pixels.size() != 3 * image.width * image.height)
    throw InputError("send: expected an RGB raster");

  const sockaddr_in addr = resolve(endpoint, "connect");
  Fd sock(::socket(AF_INET, SOCK_STREAM, 0));
  if (sock.fd < 0) throw NetworkError("connect", std::strerror(errno));
  if (::connect(sock.fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) < 0)
    throw NetworkError("connect", endpoint.str() + ": " + std::strerror(errno));
  const int one = 1;
  ::setsockopt(sock.fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);

  auto expect = [](const Frame& f, FrameType want, const std::string& stage) {
    if (f.type == FrameType::Error) throw ProtocolError(stage + ": server error: " + frame_text(f));
    if (f.type != want) throw ProtocolError(stage + ": unexpected frame type " + std::to_string(int(f.type)));
  };

  const double t0 = now_s();
  std::uint64_t sent = send_frame(sock.fd, {FrameType::Hello, {}}, "hello");
  const Frame hello = recv_frame(sock.fd, "hello").first;
  expect(hello, FrameType::Hello, "hello");
  Reader hr{hello.payload, 0, "HELLO"};
  const std::uint64_t session_id = hr.u64();

  SlideMeta meta;
  meta.magnification = magnification;
  meta.slide_id = opts.slide_id;
  meta.truth = opts.truth;
  meta.channels = 3;
  meta.height = static_cast<std::uint32_t>(image.height);
  meta.width = static_cast<std::uint32_t>(image.width);
  meta.total_bytes = image.pixels.size();
  meta.chunk_count = static_cast<std::uint32_t>((meta.total_bytes + opts.chunk_size - 1) / opts.chunk_size);
  sent += send_frame(sock.fd, {FrameType::SlideMeta, encode_meta(meta)}, "meta");

  try {
    for (std::uint32_t i = 0; i < meta.chunk_count; ++i) {
      const std::size_t begin = std::size_t{i} * opts.chunk_size;
      const std::size_t end = std::min<std::size_t>(begin + opts.chunk_size, image.pixels.size());
      Writer w;
      w.out.reserve(4 + end - begin);
      w.u32(i);
      w.bytes(image.pixels.data() + begin, end - begin);
      sent += send_frame(sock.fd, {FrameType::SlideChunk, std::move(w.out)}, "upload");
    }
  } catch (const NetworkError&) {
    // The server may have rejected the upload early; prefer its ERROR frame.
    const Frame reply = recv_frame(sock.fd, "upload").first;
    expect(reply, FrameType::Result, "upload");
    throw;
  }
  const Frame reply = recv_frame(sock.fd, "result").first;
  const double wall = now_s() - t0;
  expect(reply, FrameType::Result, "result");

  SendResult out;
  out.diagnosis = decode_result(reply.payload);
  if (out.diagnosis.session_id != session_id) throw ProtocolError("result: session id mismatch");
  out.timing.bytes = sent;
  out.timing.magnification = magnification;
  out.timing.inference_s = out.diagnosis.timing.inference_s;
  if (opts.channel.mode == ChannelMode::Simulated) {
    out.timing.transfer_s = opts.channel.transfer_seconds(sent, session_id);
    out.timing.total_s = out.timing.transfer_s + out.timing.inference_s;
  } else {
    out.timing.total_s = wall;
    out.timing.transfer_s = std::max(0.0, wall - out.timing.inference_s);
  }
  return out;
}

SendResult send_slide(const Endpoint& endpoint, const std::filesystem::path& slide_dir, int magnification,
                      SendOptions opts) {
  (void)level_factor(magnification);
  const SyntheticSlide slide = load_slide(slide_dir);
  if (opts.truth < 0) opts.truth = slide.label;
  opts.slide_id = slide.slide_id;
  return send_raster(endpoint, slide_payload(slide, magnification), magnification, opts);
}

}  // namespace magpath
