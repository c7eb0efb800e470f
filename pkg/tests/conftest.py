import faulthandler
import os
import signal
import sys

import pytest

from tests.parameters import create_redis_client, make_server, random_name


try:
    import redis

    REDIS_AVAILABLE = True
except ImportError:
    REDIS_AVAILABLE = False


def _cleanup_redis_db():
    """Clean the Redis test database."""
    if not REDIS_AVAILABLE:
        return

    try:
        r = create_redis_client()
        r.flushdb()
        try:
            r.connection_pool.disconnect()
        except Exception:
            pass
        try:
            r.close()
        except Exception:
            pass
    except (redis.ConnectionError, redis.TimeoutError, redis.ResponseError, ConnectionError):
        # Redis not available, skip cleanup
        pass


def pytest_configure(config):
    """Configure pytest before test collection."""
    faulthandler.enable(file=sys.stderr, all_threads=True)


def pytest_sessionstart(session):
    """Make a stack dump if tests are stuck."""
    faulthandler.dump_traceback_later(120, file=sys.stderr)

    def segfault_handler(signum, frame):
        sys.stderr.write("\n" + "=" * 70 + "\n")
        sys.stderr.write("CRITICAL: SIGSEGV (Segmentation Fault) detected!\n")
        sys.stderr.write("=" * 70 + "\n")
        sys.stderr.flush()
        faulthandler.dump_traceback(file=sys.stderr, all_threads=True)
        sys.stderr.flush()
        os._exit(139)

    signal.signal(signal.SIGSEGV, segfault_handler)

    _cleanup_redis_db()


def pytest_sessionfinish(session, exitstatus):
    """Clean up after all tests are done."""
    faulthandler.cancel_dump_traceback_later()
    _cleanup_redis_db()


@pytest.fixture(scope="function")
def cleanup_redis():
    """Clean the Redis test database before and after a test."""
    _cleanup_redis_db()
    yield
    _cleanup_redis_db()


@pytest.fixture(scope="function")
def redis_client(cleanup_redis):
    """Binary-safe client of the Redis test database; xfails when Redis is unreachable."""
    try:
        client = create_redis_client()
    except ConnectionError as e:
        pytest.xfail(str(e))
    try:
        yield client
    finally:
        client.close()


@pytest.fixture(scope="function")
def server(tmp_path):
    """Idle LocalOnly server with local-disk storage on the virtual clock."""
    srv = make_server(tmp_path, sc_mode="LocalOnly", terrain_mode="LocalSync")
    try:
        yield srv
    finally:
        srv.close()


@pytest.fixture(scope="function")
def offloaded_server(tmp_path):
    """Server offloading constructs and terrain to the emulated runtime."""
    srv = make_server(tmp_path / "offloaded", sc_mode="Offloaded", terrain_mode="Offloaded")
    try:
        yield srv
    finally:
        srv.close()


@pytest.fixture(scope="function")
def name():
    return random_name()
