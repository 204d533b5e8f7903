#include <deque>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "stagesim/control.hpp"

namespace stagesim {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

struct ControlServer::Impl {
  Impl(SessionHost& h, ControlServerOptions o) : host(h), options(std::move(o)), protocol(h) {}

  SessionHost& host;
  ControlServerOptions options;
  ControlProtocol protocol;
  net::io_context ioc;
  std::optional<tcp::acceptor> acceptor;
  std::vector<std::thread> threads;
  std::uint16_t bound_port = 0;

  std::mutex sessions_mutex;
  std::set<int> subscriptions;
  bool stopping = false;

  void do_accept();
  int subscribe(SessionHost::Subscriber s) {
    std::lock_guard<std::mutex> lock(sessions_mutex);
    if (stopping) return 0;
    const int id = host.subscribe(std::move(s));
    subscriptions.insert(id);
    return id;
  }
  void unsubscribe(int id) {
    std::lock_guard<std::mutex> lock(sessions_mutex);
    if (subscriptions.erase(id)) host.unsubscribe(id);
  }
};

namespace {

constexpr std::size_t kMaxQueuedMessages = 4096;

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket&& socket, ControlServer::Impl& impl) : ws_(std::move(socket)), impl_(impl) {}

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
  }

  void send(std::shared_ptr<const std::string> msg) {
    net::post(ws_.get_executor(), [self = shared_from_this(), msg = std::move(msg)] {
      if (self->closed_) return;
      if (self->queue_.size() >= kMaxQueuedMessages) {
        // Client is not reading; drop it rather than buffer without bound.
        self->close();
        return;
      }
      self->queue_.push_back(msg);
      if (!self->writing_) self->do_write();
    });
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    std::weak_ptr<WsSession> weak = shared_from_this();
    sub_id_ = impl_.subscribe([weak](const std::string& m) {
      if (auto s = weak.lock()) s->send(std::make_shared<const std::string>(m));
    });
    send(std::make_shared<const std::string>(impl_.protocol.hello().dump()));
    do_read();
  }

  void do_read() { ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this())); }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      shutdown();
      return;
    }
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    const nlohmann::json reply = impl_.protocol.handle(text);
    send(std::make_shared<const std::string>(reply.dump()));
    do_read();
  }

  void do_write() {
    writing_ = true;
    ws_.text(true);
    ws_.async_write(net::buffer(*queue_.front()), beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec) {
      shutdown();
      return;
    }
    queue_.pop_front();
    if (!queue_.empty() && !closed_)
      do_write();
    else
      writing_ = false;
  }

  void close() {
    shutdown();
    ws_.async_close(websocket::close_code::policy_error, [self = shared_from_this()](beast::error_code) {});
  }

  void shutdown() {
    if (closed_) return;
    closed_ = true;
    queue_.clear();
    if (sub_id_) impl_.unsubscribe(sub_id_);
    sub_id_ = 0;
  }

  websocket::stream<beast::tcp_stream> ws_;
  ControlServer::Impl& impl_;
  beast::flat_buffer buffer_;
  std::deque<std::shared_ptr<const std::string>> queue_;
  bool writing_ = false;
  bool closed_ = false;
  int sub_id_ = 0;
};

std::string mime_type(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  if (ext == ".html" || ext == ".htm") return "text/html; charset=utf-8";
  if (ext == ".js" || ext == ".mjs") return "text/javascript; charset=utf-8";
  if (ext == ".css") return "text/css; charset=utf-8";
  if (ext == ".json") return "application/json";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".png") return "image/png";
  if (ext == ".ico") return "image/x-icon";
  if (ext == ".wasm") return "application/wasm";
  return "application/octet-stream";
}

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, ControlServer::Impl& impl) : stream_(std::move(socket)), impl_(impl) {}

  void run() {
    net::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpSession::do_read, shared_from_this()));
  }

 private:
  void do_read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec == http::error::end_of_stream) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    if (ec) return;
    if (websocket::is_upgrade(req_)) {
      stream_.expires_never();
      std::make_shared<WsSession>(stream_.release_socket(), impl_)->run(std::move(req_));
      return;
    }
    auto res = std::make_shared<http::response<http::string_body>>(respond());
    res_ = res;
    http::async_write(stream_, *res,
                      beast::bind_front_handler(&HttpSession::on_write, shared_from_this(), res->need_eof()));
  }

  void on_write(bool close, beast::error_code ec, std::size_t) {
    res_.reset();
    if (ec) return;
    if (close) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    do_read();
  }

  http::response<http::string_body> reply(http::status status, std::string body, const std::string& type) {
    http::response<http::string_body> res{status, req_.version()};
    res.set(http::field::server, "stagesim");
    res.set(http::field::content_type, type);
    res.keep_alive(req_.keep_alive());
    res.body() = req_.method() == http::verb::head ? std::string() : std::move(body);
    res.prepare_payload();
    return res;
  }

  http::response<http::string_body> respond() {
    if (req_.method() != http::verb::get && req_.method() != http::verb::head)
      return reply(http::status::method_not_allowed, "method not allowed\n", "text/plain");
    std::string target(req_.target());
    if (const auto q = target.find('?'); q != std::string::npos) target.resize(q);
    if (target == "/api/schema") return reply(http::status::ok, control_schema().dump(2), "application/json");
    if (target == "/api/state") return reply(http::status::ok, impl_.host.state_json().dump(2), "application/json");

    const std::filesystem::path& root = impl_.options.static_dir;
    if (root.empty() || target.empty() || target[0] != '/' || target.find("..") != std::string::npos)
      return reply(http::status::not_found, "not found\n", "text/plain");
    if (target.back() == '/') target += "index.html";
    const std::filesystem::path file = root / target.substr(1);
    std::ifstream in(file, std::ios::binary);
    if (!in || std::filesystem::is_directory(file)) return reply(http::status::not_found, "not found\n", "text/plain");
    std::ostringstream content;
    content << in.rdbuf();
    return reply(http::status::ok, content.str(), mime_type(file));
  }

  beast::tcp_stream stream_;
  ControlServer::Impl& impl_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
  std::shared_ptr<void> res_;
};

}  // namespace

void ControlServer::Impl::do_accept() {
  acceptor->async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (!ec) std::make_shared<HttpSession>(std::move(socket), *this)->run();
    if (acceptor->is_open()) do_accept();
  });
}

ControlServer::ControlServer(SessionHost& host, ControlServerOptions options)
    : impl_(std::make_unique<Impl>(host, std::move(options))) {}

ControlServer::~ControlServer() { stop(); }

void ControlServer::start() {
  Impl& s = *impl_;
  if (s.acceptor) throw Error("ControlServer: already started");
  beast::error_code ec;
  const auto address = net::ip::make_address(s.options.address, ec);
  if (ec) throw ValidationError("ControlServer: bad address " + s.options.address);
  const tcp::endpoint endpoint(address, s.options.port);
  s.acceptor.emplace(s.ioc);
  s.acceptor->open(endpoint.protocol(), ec);
  if (!ec) s.acceptor->bind(endpoint, ec);
  if (!ec) s.acceptor->listen(net::socket_base::max_listen_connections, ec);
  if (ec) {
    s.acceptor.reset();
    throw Error("port busy or unavailable: " + s.options.address + ":" + std::to_string(s.options.port) + " (" +
                ec.message() + ")");
  }
  s.bound_port = s.acceptor->local_endpoint().port();
  s.do_accept();
  for (int i = 0; i < std::max(1, s.options.threads); ++i) s.threads.emplace_back([&s] { s.ioc.run(); });
}

void ControlServer::stop() {
  Impl& s = *impl_;
  {
    std::lock_guard<std::mutex> lock(s.sessions_mutex);
    if (s.stopping) return;
    s.stopping = true;
    for (int id : s.subscriptions) s.host.unsubscribe(id);
    s.subscriptions.clear();
  }
  if (s.acceptor) {
    net::post(s.ioc, [&s] {
      beast::error_code ec;
      s.acceptor->close(ec);
    });
  }
  s.ioc.stop();
  for (std::thread& t : s.threads) t.join();
  s.threads.clear();
}

std::uint16_t ControlServer::port() const { return impl_->bound_port; }

}  // namespace stagesim
