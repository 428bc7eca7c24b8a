#include "convlora/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace convlora {
namespace {

std::size_t resolve_worker_count() {
  if (const char* env = std::getenv("CONVLORA_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  std::size_t hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Lazily started pool; lives for the process lifetime.
class Pool {
 public:
  static Pool& instance() {
    static Pool pool(resolve_worker_count());
    return pool;
  }

  std::size_t threads() const { return n_threads_; }

  void run(std::size_t count, const std::function<void(std::size_t)>& fn) {
    if (count == 0) return;
    if (n_threads_ == 1 || count == 1) {
      for (std::size_t i = 0; i < count; ++i) fn(i);
      return;
    }
    std::unique_lock<std::mutex> lock(mutex_);
    fn_ = &fn;
    count_ = count;
    next_.store(0, std::memory_order_relaxed);
    pending_ = n_threads_ - 1;
    error_ = nullptr;
    ++generation_;
    lock.unlock();
    cv_start_.notify_all();

    work();  // caller participates

    lock.lock();
    cv_done_.wait(lock, [&] { return pending_ == 0; });
    fn_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

 private:
  explicit Pool(std::size_t n) : n_threads_(n) {
    for (std::size_t i = 1; i < n_threads_; ++i)
      workers_.emplace_back([this] { worker_loop(); });
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stop_ = true;
    }
    cv_start_.notify_all();
    for (auto& t : workers_) t.join();
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lock(mutex_);
      cv_start_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      lock.unlock();

      work();

      lock.lock();
      if (--pending_ == 0) cv_done_.notify_one();
    }
  }

  void work() {
    const auto& fn = *fn_;
    for (;;) {
      std::size_t i = next_.fetch_add(1, std::memory_order_relaxed);
      if (i >= count_) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex_);
        if (!error_) error_ = std::current_exception();
      }
    }
  }

  const std::size_t n_threads_;
  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::mutex error_mutex_;
  std::condition_variable cv_start_;
  std::condition_variable cv_done_;
  const std::function<void(std::size_t)>* fn_ = nullptr;
  std::size_t count_ = 0;
  std::atomic<std::size_t> next_{0};
  std::size_t pending_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
};

}  // namespace

std::size_t worker_count() { return Pool::instance().threads(); }

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  Pool::instance().run(count, fn);
}

}  // namespace convlora
