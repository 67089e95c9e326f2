#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "magpath/channel.hpp"
#include "magpath/encoder.hpp"
#include "magpath/gltrans.hpp"
#include "magpath/netpbm.hpp"
#include "magpath/synth.hpp"

namespace magpath {

// Wire frame: "MAGT" | version u8 | type u8 | payload length u32 BE | payload |
// CRC32 u32 BE. The CRC covers type, length and payload so that a corrupted
// header byte is caught as well as a corrupted payload byte.
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 10;
inline constexpr std::size_t kFrameOverhead = kFrameHeaderSize + 4;
inline constexpr std::size_t kDefaultChunkSize = 64 * 1024;
inline constexpr std::uint64_t kMaxPayload = 1ull << 31;

enum class FrameType : std::uint8_t { Hello = 1, SlideMeta = 2, SlideChunk = 3, Result = 4, Error = 5 };

struct Frame {
  FrameType type = FrameType::Hello;
  std::vector<std::uint8_t> payload;
  friend bool operator==(const Frame&, const Frame&) = default;
};

struct ProtocolError : InputError {
  using InputError::InputError;
};
struct BadMagic : ProtocolError {
  using ProtocolError::ProtocolError;
};
struct VersionMismatch : ProtocolError {
  using ProtocolError::ProtocolError;
};
struct ChecksumError : ProtocolError {
  using ProtocolError::ProtocolError;
};
/// Refused connections, resets and unexpected EOF. `stage` names the session
/// step that failed.
struct NetworkError : std::runtime_error {
  NetworkError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage(std::move(stage)) {}
  std::string stage;
};

std::vector<std::uint8_t> encode_frame(const Frame& frame);
/// Decodes exactly one frame occupying all of `bytes`. Checks run in wire
/// order: magic, version, type, length, CRC.
Frame decode_frame(const std::vector<std::uint8_t>& bytes);

struct SlideMeta {
  int magnification = 20;
  int slide_id = 0;
  int truth = -1;  // ground-truth label when the client knows it, else -1
  std::uint32_t channels = 3, height = 0, width = 0;
  std::uint64_t total_bytes = 0;
  std::uint32_t chunk_count = 0;
  friend bool operator==(const SlideMeta&, const SlideMeta&) = default;
};
std::vector<std::uint8_t> encode_meta(const SlideMeta& m);
SlideMeta decode_meta(const std::vector<std::uint8_t>& payload);

struct TimingBreakdown {
  double transfer_s = 0.0;
  double inference_s = 0.0;
  double total_s = 0.0;
  std::uint64_t bytes = 0;
  int magnification = 20;
};

struct DiagnosisResult {
  std::uint64_t session_id = 0;
  int label = 0;
  std::array<double, 2> probs{0.5, 0.5};
  std::string heatmap_pgm;
  TimingBreakdown timing;  // as measured by the server
};
std::vector<std::uint8_t> encode_result(const DiagnosisResult& r);
DiagnosisResult decode_result(const std::vector<std::uint8_t>& payload);

struct SessionLog {
  std::uint64_t session_id = 0;
  int magnification = 20;
  std::uint64_t bytes = 0;
  double transfer_s = 0.0, inference_s = 0.0;
  int label = 0;
  double prob = 0.0;  // P(class 1)
  int truth = -1;
};
/// Header: session_id,magnification,bytes,transfer_s,inference_s,label,prob,truth
std::string session_log_csv(const std::vector<SessionLog>& logs);
std::vector<SessionLog> parse_session_log_csv(const std::string& text);

struct SessionSummary {
  int magnification = 0;
  std::size_t sessions = 0;
  double mean_bytes = 0.0, mean_transfer_s = 0.0, mean_inference_s = 0.0;
  double auc = 0.0;  // NaN unless both true classes are present
};
/// One row per magnification, ascending. Throws InputError on an empty log.
std::vector<SessionSummary> session_report(const std::vector<SessionLog>& logs);
std::string session_report_csv(const std::vector<SessionSummary>& rows);

/// Encoder and classifier per magnification. 20x uses the teacher; lower
/// magnifications use their aligned student.
struct ServerModels {
  std::map<int, Encoder> encoders;
  std::map<int, GLTrans> classifiers;
  TilingConfig tiling;

  std::uint64_t checksum() const;
};

/// The image a client uploads at one magnification: 8-bit interleaved RGB.
Raster slide_payload(const SyntheticSlide& slide, int magnification);

/// Server-side work for one uploaded level; pure and thread-safe.
DiagnosisResult diagnose(const ServerModels& models, const SlideMeta& meta, const std::vector<std::uint8_t>& pixels);

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  static Endpoint parse(const std::string& text);  // host:port
  std::string str() const;
};

/// Speaks the protocol on one connected socket until RESULT or ERROR is sent.
/// Exposed so tests can drive it over a socketpair.
SessionLog serve_connection(int fd, const ServerModels& models, const ChannelModel& channel,
                            std::uint64_t session_id);

class Server {
 public:
  /// Binds and starts accepting; port 0 picks a free port. Each connection
  /// gets its own thread; models are shared read-only.
  Server(Endpoint endpoint, std::shared_ptr<const ServerModels> models, ChannelModel channel,
         std::filesystem::path log_dir = {});
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  const Endpoint& endpoint() const { return endpoint_; }
  /// Blocks until `count` sessions have finished (successfully or not).
  void wait_for_sessions(std::size_t count);
  /// Finished sessions in session-id order.
  std::vector<SessionLog> logs() const;
  void stop();

 private:
  void accept_loop();

  Endpoint endpoint_;
  std::shared_ptr<const ServerModels> models_;
  ChannelModel channel_;
  std::filesystem::path log_dir_;
  int listen_fd_ = -1;
  std::atomic<bool> running_{true};
  std::atomic<std::uint64_t> next_session_{1};
  std::thread acceptor_;
  std::vector<std::thread> workers_;
  mutable std::mutex mutex_;
  std::condition_variable finished_cv_;
  std::size_t finished_ = 0;
  std::map<std::uint64_t, SessionLog> logs_;
};

struct SendOptions {
  ChannelModel channel;
  std::size_t chunk_size = kDefaultChunkSize;
  int truth = -1;
  int slide_id = 0;
};

struct SendResult {
  DiagnosisResult diagnosis;
  TimingBreakdown timing;  // client view; simulated mode uses the channel model
};

/// Uploads one level and waits for the diagnosis. In simulated mode
/// transfer_s is the channel model's figure for the bytes written and
/// total_s = transfer_s + the server's inference time.
SendResult send_raster(const Endpoint& endpoint, const Raster& image, int magnification, const SendOptions& opts);
/// Loads a slide directory and sends its level at `magnification`.
SendResult send_slide(const Endpoint& endpoint, const std::filesystem::path& slide_dir, int magnification,
                      SendOptions opts);

/// Bytes a client writes for one upload, frame overhead included.
std::uint64_t upload_bytes(std::uint64_t payload_bytes, std::size_t chunk_size);

}  // namespace magpath
