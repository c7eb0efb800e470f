import pytest

from mve_offload.clock import VirtualClock
from mve_offload.errors import BackendUnavailableError, BlobNotFoundError, MveConfigurationError, MveValueError
from mve_offload.storages import EmulatedBlobStorage, LocalDiskStorage, make_storage, redis_client_from_url
from mve_offload.typings import StorageMode, coerce_enum
from tests.parameters import create_redis_client, random_name, redis_storage_modes, storage_modes


def open_storage(mode, tmp_path, request):
    client = request.getfixturevalue("redis_client") if coerce_enum(StorageMode, mode) == StorageMode.redis else None
    return make_storage(mode, name=random_name(), root=tmp_path / "blobs", redis_client=client, clock=VirtualClock())


class TestBlobStorages:
    @pytest.mark.parametrize("mode", storage_modes + redis_storage_modes)
    def test_read_after_write(self, mode, tmp_path, request):
        storage = open_storage(mode, tmp_path, request)
        try:
            assert len(storage) == 0
            storage.put("c_0_0", b"\x00\x01\xff")
            storage.put("c_-1_2", b"")
            assert storage.get("c_0_0") == b"\x00\x01\xff"
            assert storage.get("c_-1_2") == b""
            assert "c_0_0" in storage
            assert 5 not in storage
            assert storage.keys() == ["c_-1_2", "c_0_0"]
            assert list(storage) == storage.keys()

            storage.put("c_0_0", b"new")
            assert storage.get("c_0_0") == b"new"
            storage.delete("c_0_0")
            storage.delete("c_0_0")
            assert not storage.exists("c_0_0")
            with pytest.raises(BlobNotFoundError):
                storage.get("c_0_0")
            with pytest.raises(KeyError):
                storage.get("c_9_9")

            storage.clear()
            assert len(storage) == 0
        finally:
            storage.close()

    @pytest.mark.parametrize("mode", ["local", StorageMode.local])
    def test_local_persists_across_instances(self, mode, tmp_path):
        make_storage(mode, root=tmp_path).put("c_1_1", b"abc")
        again = make_storage(mode, root=tmp_path)
        assert again.get("c_1_1") == b"abc"
        assert (tmp_path / "c_1_1.chunk").is_file()

    @pytest.mark.parametrize("key", ["", "../x", "a/b", "a\\b", ".hidden"])
    def test_local_rejects_bad_keys(self, key, tmp_path):
        with pytest.raises(MveValueError):
            LocalDiskStorage("world", tmp_path).put(key, b"x")

    def test_local_ignores_temporary_files(self, tmp_path):
        storage = LocalDiskStorage("world", tmp_path)
        storage.put("c_0_0", b"x")
        (tmp_path / ".c_1_1.chunk.1.tmp").write_bytes(b"partial")
        (tmp_path / "manifest.json").write_text("{}")
        assert storage.keys() == ["c_0_0"]

    def test_emulated_counts_operations(self):
        storage = EmulatedBlobStorage("world", clock=VirtualClock())
        assert storage.remote
        assert storage.injects_latency
        storage.put("c_0_0", b"x")
        storage.get("c_0_0")
        with pytest.raises(BlobNotFoundError):
            storage.get("c_0_1")
        assert (storage.reads, storage.writes) == (2, 1)

    @pytest.mark.parametrize("mode", ["s3", 7, None])
    def test_invalid_mode(self, mode):
        with pytest.raises(MveValueError):
            make_storage(mode)


class TestRedisBlobStorage:
    @pytest.mark.redis
    def test_keys_are_scoped_by_name(self, redis_client):
        first = make_storage("redis", name=random_name(), redis_client=redis_client)
        second = make_storage("redis", name=random_name(), redis_client=redis_client)
        first.put("c_0_0", b"a")
        second.put("c_0_1", b"b")
        assert first.keys() == ["c_0_0"]
        assert second.keys() == ["c_0_1"]
        assert redis_client.get(f"{{{first.name}}}:c_0_0") == b"a"

    @pytest.mark.redis
    def test_binary_client_is_required(self, redis_client):
        try:
            decoding = create_redis_client(decode_responses=True)
        except ConnectionError as e:
            pytest.xfail(str(e))
        try:
            with pytest.raises(MveConfigurationError):
                make_storage("redis", redis_client=decoding)
        finally:
            decoding.close()

    def test_client_is_required(self):
        with pytest.raises(MveConfigurationError):
            make_storage("redis")
        with pytest.raises(MveConfigurationError):
            make_storage("redis", redis_client=object())


class TestRedisClientChecks:
    def test_decoding_clients_are_detected(self):
        redis = pytest.importorskip("redis")
        from mve_offload.storages.redis import redis_client_decodes_responses

        assert redis_client_decodes_responses(redis.Redis(decode_responses=True))
        assert not redis_client_decodes_responses(redis.Redis())
        assert not redis_client_decodes_responses(redis_client_from_url("redis://localhost:6379/0"))
        assert not redis_client_decodes_responses(object())

    def test_unreachable_server(self):
        redis = pytest.importorskip("redis")
        client = redis.Redis(host="127.0.0.1", port=1, socket_connect_timeout=0.2)
        with pytest.raises(MveConfigurationError):
            make_storage("redis", redis_client=client)

    def test_errors_become_backend_unavailable(self, monkeypatch):
        redis = pytest.importorskip("redis")
        client = redis.Redis(host="127.0.0.1", port=1)

        def refuse(*args, **kwargs):
            raise redis.exceptions.ConnectionError("connection refused")

        monkeypatch.setattr(client, "ping", lambda: True)
        storage = make_storage("redis", name=random_name(), redis_client=client)
        monkeypatch.setattr(client, "get", refuse)
        monkeypatch.setattr(client, "set", refuse)
        with pytest.raises(BackendUnavailableError):
            storage.get("c_0_0")
        with pytest.raises(BackendUnavailableError):
            storage.put("c_0_0", b"x")
        storage.close()
