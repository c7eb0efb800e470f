import asyncio
import struct

import pytest

from mve_offload.errors import ProtocolError
from mve_offload.protocol import (
    Action,
    AvatarPositions,
    BlockChange,
    Chat,
    ChunkData,
    InProcessSession,
    Join,
    ProtocolListener,
    Welcome,
    decode_body,
    encode_message,
    read_message,
    split_frames,
    write_message,
)
from mve_offload.typings import ActionKind, Block, BlockType, PlayerAction, Position


MESSAGES = [
    Join("bot 1"),
    Action(PlayerAction(ActionKind.Move, 3, client_tick=9, pos=Position(-5, 4, 70), speed=8)),
    Action(PlayerAction(ActionKind.Place, 3, pos=Position(1, 4, 1), block_type=BlockType.Wire)),
    Action(PlayerAction(ActionKind.Chat, 3, text="héllo")),
    Welcome(42, 20),
    ChunkData(b"\x00" * 17),
    BlockChange(Position(-1, 200, 3), Block(BlockType.Lamp, 15)),
    AvatarPositions([(1, Position(0, 4, 0)), (2, Position(-300, 60, 12))]),
    AvatarPositions([]),
    Chat(7, "hi"),
]


class TestFrames:
    def test_stream_of_frames(self):
        buffer = b"".join(encode_message(m) for m in MESSAGES)
        messages, rest = split_frames(buffer)
        assert messages == MESSAGES
        assert rest == b""

    def test_partial_frame_is_kept(self):
        frame = encode_message(Chat(1, "partial"))
        messages, rest = split_frames(encode_message(Welcome(1, 20)) + frame[:7])
        assert messages == [Welcome(1, 20)]
        assert rest == frame[:7]
        assert split_frames(rest + frame[7:]) == ([Chat(1, "partial")], b"")

    @pytest.mark.parametrize("length", [0, (1 << 24) + 1])
    def test_invalid_length(self, length):
        with pytest.raises(ProtocolError):
            split_frames(struct.pack("<I", length) + b"\x01")

    @pytest.mark.parametrize(
        "body",
        [
            b"",
            b"\x63",
            b"\x02\x01",
            b"\x0a\x00",
            b"\x0d\x02\x00\x00\x00",
            b"\x01\xff\xfe",
        ],
    )
    def test_malformed_body(self, body):
        with pytest.raises(ProtocolError):
            decode_body(body)

    def test_only_messages_are_encoded(self):
        with pytest.raises(ProtocolError):
            encode_message(("not", "a", "message"))


class TestSessions:
    def test_in_process_session(self):
        session = InProcessSession()
        session.send(Welcome(1, 20))
        session.send(Chat(1, "a"))
        session.send(Chat(1, "b"))
        assert session.sent == {"Welcome": 1, "Chat": 2}
        assert session.drain() == [Welcome(1, 20), Chat(1, "a"), Chat(1, "b")]
        assert session.drain() == []
        session.close()
        session.send(Chat(1, "dropped"))
        assert session.sent["Chat"] == 2

    def test_counts_only(self):
        session = InProcessSession(keep_messages=False)
        session.send(Welcome(1, 20))
        assert session.drain() == []
        assert session.sent["Welcome"] == 1


async def tick_until(server, condition, attempts=300):
    for _ in range(attempts):
        server.run_tick()
        await asyncio.sleep(0.01)
        if condition():
            return True
    return False


class TestProtocolListener:
    @pytest.mark.timeout(60)
    async def test_bot_session(self, server):
        with ProtocolListener(server, port=0) as listener:
            assert listener.port != 0
            reader, writer = await asyncio.open_connection("127.0.0.1", listener.port)
            received = []

            async def pump():
                while True:
                    received.append(await read_message(reader))

            task = asyncio.create_task(pump())
            try:
                await write_message(writer, Join("tcp bot"))
                assert await tick_until(server, lambda: any(isinstance(m, Welcome) for m in received))
                welcome = received[0]
                assert welcome == Welcome(1, 20)
                assert server.players == [1]

                # the listener stamps actions with the session's player
                await write_message(writer, Action(PlayerAction(ActionKind.Chat, 99, text="hello")))
                assert await tick_until(server, lambda: any(isinstance(m, Chat) for m in received))
                assert [m for m in received if isinstance(m, Chat)] == [Chat(1, "hello")]
                assert any(isinstance(m, ChunkData) for m in received)
                assert any(isinstance(m, AvatarPositions) for m in received)

                writer.close()
                assert await tick_until(server, lambda: server.players == [])
            finally:
                task.cancel()
                await asyncio.gather(task, return_exceptions=True)

    @pytest.mark.timeout(30)
    async def test_first_frame_must_be_join(self, server):
        with ProtocolListener(server, port=0) as listener:
            reader, writer = await asyncio.open_connection("127.0.0.1", listener.port)
            await write_message(writer, Chat(1, "too early"))
            assert await asyncio.wait_for(reader.read(), timeout=10) == b""
            writer.close()
            server.run_tick()
            assert server.players == []

    @pytest.mark.timeout(30)
    def test_port_in_use(self, server):
        with ProtocolListener(server, port=0) as first:
            with pytest.raises(OSError):
                ProtocolListener(server, port=first.port).start()
