"""
Bot wire protocol.

Frames are length-prefixed (little-endian)::

    length: uint32 (tag + payload), tag: uint8, payload

Client to server: ``Join``, ``Action``. Server to client: ``Welcome``,
``ChunkData``, ``BlockChange``, ``AvatarPositions``, ``Chat``.

Sessions are what the server sends to. ``InProcessSession`` collects messages
for bots linked into the same process; ``TcpSession`` writes frames to an
asyncio stream owned by the ``ProtocolListener`` event loop thread.
"""

import asyncio
import struct
import threading

from abc import ABC, abstractmethod
from collections import Counter
from enum import IntEnum
from typing import TYPE_CHECKING, Any, NamedTuple, Optional, Union

from mve_offload.errors import MalformedPayloadError, ProtocolError, ServerFullError
from mve_offload.logs import DEFAULT_LOG_FORMAT, get_logger
from mve_offload.typings import (
    ActionKind,
    Block,
    BlockType,
    OptionalLevel,
    PlayerAction,
    PlayerId,
    Position,
)


if TYPE_CHECKING:
    from mve_offload.server import GameServer


_LENGTH = struct.Struct("<I")
_ACTION = struct.Struct("<BqqBiiiBBIi")
_WELCOME = struct.Struct("<qH")
_BLOCK_CHANGE = struct.Struct("<iiiBB")
_AVATAR = struct.Struct("<qiii")
_COUNT = struct.Struct("<I")
_PLAYER = struct.Struct("<q")
MAX_FRAME_BYTES = 1 << 24


class MessageTag(IntEnum):
    """Frame tags."""

    Join = 1
    Action = 2
    Welcome = 10
    ChunkData = 11
    BlockChange = 12
    AvatarPositions = 13
    Chat = 14


class Join(NamedTuple):
    """First frame of a bot connection."""

    name: str = ""


class Action(NamedTuple):
    """A player input; the server overwrites ``player_id`` with the session's player."""

    action: PlayerAction


class Welcome(NamedTuple):
    """Answer to ``Join``."""

    player_id: PlayerId
    tick_rate_hz: int


class ChunkData(NamedTuple):
    """Encoded chunk bytes."""

    data: bytes


class BlockChange(NamedTuple):
    """A player-caused block change."""

    pos: Position
    block: Block


class AvatarPositions(NamedTuple):
    """Every avatar position after a tick."""

    positions: list[tuple[PlayerId, Position]]


class Chat(NamedTuple):
    """Broadcast chat line."""

    player_id: PlayerId
    text: str


Message = Union[Join, Action, Welcome, ChunkData, BlockChange, AvatarPositions, Chat]
_TAG_BY_TYPE = {
    Join: MessageTag.Join,
    Action: MessageTag.Action,
    Welcome: MessageTag.Welcome,
    ChunkData: MessageTag.ChunkData,
    BlockChange: MessageTag.BlockChange,
    AvatarPositions: MessageTag.AvatarPositions,
    Chat: MessageTag.Chat,
}


def _encode_action(a: PlayerAction) -> bytes:
    pos = a.pos if a.pos is not None else Position(0, 0, 0)
    header = _ACTION.pack(
        int(a.kind),
        a.player_id,
        a.client_tick,
        a.pos is not None,
        pos.x,
        pos.y,
        pos.z,
        a.speed,
        int(a.block_type),
        a.duration_ms,
        a.item,
    )
    return header + a.text.encode("utf-8")


def _decode_action(payload: bytes) -> PlayerAction:
    if len(payload) < _ACTION.size:
        raise MalformedPayloadError("Action frame is truncated.")
    kind, player_id, client_tick, has_pos, x, y, z, speed, block_type, duration_ms, item = _ACTION.unpack_from(
        payload
    )
    try:
        return PlayerAction(
            kind=ActionKind(kind),
            player_id=player_id,
            client_tick=client_tick,
            pos=Position(x, y, z) if has_pos else None,
            speed=speed,
            block_type=BlockType(block_type),
            duration_ms=duration_ms,
            text=payload[_ACTION.size :].decode("utf-8"),
            item=item,
        )
    except (ValueError, UnicodeDecodeError) as e:
        raise MalformedPayloadError(f"Invalid action frame: {e}") from e


def _encode_payload(message: Message) -> bytes:
    if isinstance(message, Join):
        return message.name.encode("utf-8")
    if isinstance(message, Action):
        return _encode_action(message.action)
    if isinstance(message, Welcome):
        return _WELCOME.pack(message.player_id, message.tick_rate_hz)
    if isinstance(message, ChunkData):
        return bytes(message.data)
    if isinstance(message, BlockChange):
        return _BLOCK_CHANGE.pack(*message.pos, int(message.block.type), message.block.power)
    if isinstance(message, AvatarPositions):
        parts = [_COUNT.pack(len(message.positions))]
        parts.extend(_AVATAR.pack(pid, *pos) for pid, pos in message.positions)
        return b"".join(parts)
    return _PLAYER.pack(message.player_id) + message.text.encode("utf-8")


def encode_message(message: Message) -> bytes:
    """Encode one message as a complete frame."""
    tag = _TAG_BY_TYPE.get(type(message))
    if tag is None:
        raise ProtocolError(f"Not a protocol message: {type(message).__name__}.")
    payload = _encode_payload(message)
    return _LENGTH.pack(len(payload) + 1) + bytes((tag,)) + payload


def decode_body(body: bytes) -> Message:
    """Decode a frame without its length prefix.

    :raises ProtocolError: unknown tag or malformed payload
    """
    if not body:
        raise ProtocolError("Empty frame.")
    try:
        tag = MessageTag(body[0])
    except ValueError:
        raise ProtocolError(f"Unknown message tag: {body[0]}.") from None
    payload = body[1:]
    try:
        if tag == MessageTag.Join:
            return Join(payload.decode("utf-8"))
        if tag == MessageTag.Action:
            return Action(_decode_action(payload))
        if tag == MessageTag.Welcome:
            return Welcome(*_WELCOME.unpack(payload))
        if tag == MessageTag.ChunkData:
            return ChunkData(bytes(payload))
        if tag == MessageTag.BlockChange:
            x, y, z, type_, power = _BLOCK_CHANGE.unpack(payload)
            return BlockChange(Position(x, y, z), Block(BlockType(type_), power))
        if tag == MessageTag.AvatarPositions:
            (count,) = _COUNT.unpack_from(payload)
            if len(payload) != _COUNT.size + count * _AVATAR.size:
                raise ProtocolError("AvatarPositions frame has an invalid length.")
            positions = [
                (pid, Position(x, y, z))
                for pid, x, y, z in _AVATAR.iter_unpack(payload[_COUNT.size :])
            ]
            return AvatarPositions(positions)
        (player_id,) = _PLAYER.unpack_from(payload)
        return Chat(player_id, payload[_PLAYER.size :].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise ProtocolError(f"Malformed {tag.name} frame: {e}") from e


def split_frames(buffer: bytes) -> tuple[list[Message], bytes]:
    """Decode every complete frame of a byte buffer; returns the messages and the unconsumed rest."""
    messages: list[Message] = []
    offset = 0
    while len(buffer) - offset >= _LENGTH.size:
        (length,) = _LENGTH.unpack_from(buffer, offset)
        if not 0 < length <= MAX_FRAME_BYTES:
            raise ProtocolError(f"Invalid frame length: {length}.")
        end = offset + _LENGTH.size + length
        if end > len(buffer):
            break
        messages.append(decode_body(buffer[offset + _LENGTH.size : end]))
        offset = end
    return messages, buffer[offset:]


async def read_message(reader: asyncio.StreamReader) -> Message:
    """Read one frame from a stream.

    :raises asyncio.IncompleteReadError: the peer closed the stream
    :raises ProtocolError: malformed frame
    """
    (length,) = _LENGTH.unpack(await reader.readexactly(_LENGTH.size))
    if not 0 < length <= MAX_FRAME_BYTES:
        raise ProtocolError(f"Invalid frame length: {length}.")
    return decode_body(await reader.readexactly(length))


async def write_message(writer: asyncio.StreamWriter, message: Message) -> None:
    """Write one frame and wait for the transport buffer to drain."""
    writer.write(encode_message(message))
    await writer.drain()


class BaseSession(ABC):
    """Server-side endpoint of one player connection."""

    def __init__(self) -> None:
        self.closed = False
        self.sent: Counter = Counter()

    @abstractmethod
    def send(self, message: Message) -> None:
        """Queue a message to the client; never blocks the tick thread."""
        pass

    def close(self) -> None:
        """Mark the session closed; later sends are dropped."""
        self.closed = True


class InProcessSession(BaseSession):
    """Session of a bot linked into the server process.

    :param keep_messages: keep every message for ``drain`` (otherwise only counts are kept)
    """

    def __init__(self, keep_messages: bool = True) -> None:
        super().__init__()
        self.keep_messages = keep_messages
        self.messages: list[Message] = []

    def send(self, message: Message) -> None:
        """Record a message."""
        if self.closed:
            return
        self.sent[type(message).__name__] += 1
        if self.keep_messages:
            self.messages.append(message)

    def drain(self) -> list[Message]:
        """Return and forget the recorded messages."""
        messages, self.messages = self.messages, []
        return messages


class TcpSession(BaseSession):
    """Session writing frames to an asyncio stream from any thread.

    :param writer: stream writer of the connection
    :param loop: event loop owning the writer
    """

    def __init__(self, writer: asyncio.StreamWriter, loop: asyncio.AbstractEventLoop) -> None:
        super().__init__()
        self._writer = writer
        self._loop = loop

    def send(self, message: Message) -> None:
        """Hand the frame to the event loop thread."""
        if self.closed or self._loop.is_closed():
            return
        self.sent[type(message).__name__] += 1
        self._loop.call_soon_threadsafe(self._write, encode_message(message))

    def _write(self, frame: bytes) -> None:
        if not self._writer.is_closing():
            self._writer.write(frame)

    def close(self) -> None:
        """Close the stream."""
        if self.closed:
            return
        super().close()
        if not self._loop.is_closed():
            self._loop.call_soon_threadsafe(self._writer.close)


class ProtocolListener:
    """TCP front end of a ``GameServer``, serving on its own event loop thread.

    :param server: game server the sessions join
    :param host: bind address
    :param port: bind port; ``0`` picks a free one (see ``port`` after ``start``)
    :param name: instance name used for logging
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """

    def __init__(
        self,
        server: "GameServer",
        host: str = "127.0.0.1",
        port: int = 25600,
        *,
        name: str = "listener",
        log_level: OptionalLevel = None,
        log_format: str = DEFAULT_LOG_FORMAT,
    ) -> None:
        self.server = server
        self.host = host
        self.port = port
        self.logger = get_logger(self, name, log_level, log_format)
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self._tcp_server: Optional[asyncio.AbstractServer] = None
        self._started = threading.Event()
        self._error: Optional[BaseException] = None

    def start(self) -> "ProtocolListener":
        """Bind and serve in a background thread; returns once the socket is bound."""
        self._thread = threading.Thread(target=self._run, name="ProtocolListener", daemon=True)
        self._thread.start()
        self._started.wait()
        if self._error is not None:
            raise self._error
        return self

    def _run(self) -> None:
        self._loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self._loop)
        try:
            self._tcp_server = self._loop.run_until_complete(
                asyncio.start_server(self._handle, self.host, self.port)
            )
        except OSError as e:
            self._error = e
            self._started.set()
            self._loop.close()
            return
        self.port = self._tcp_server.sockets[0].getsockname()[1]
        self.logger.info("Listening on %s:%s", self.host, self.port)
        self._started.set()
        try:
            self._loop.run_forever()
        finally:
            self._tcp_server.close()
            self._loop.run_until_complete(self._tcp_server.wait_closed())
            self._loop.close()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        try:
            first = await read_message(reader)
        except (asyncio.IncompleteReadError, ProtocolError) as e:
            self.logger.warning("Rejected connection from %s: %s", peer, e)
            writer.close()
            return
        if not isinstance(first, Join):
            self.logger.warning("Rejected connection from %s: first frame is %s", peer, type(first).__name__)
            writer.close()
            return
        session = TcpSession(writer, asyncio.get_running_loop())
        try:
            player_id = self.server.connect_player(session, first.name)
        except ServerFullError as e:
            self.logger.warning("Rejected %s: %s", peer, e)
            writer.close()
            return
        try:
            while True:
                message = await read_message(reader)
                if isinstance(message, Action):
                    self.server.submit_action(message.action._replace(player_id=player_id))
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except ProtocolError as e:
            self.logger.warning("Player %s sent a malformed frame: %s", player_id, e)
        finally:
            self.server.disconnect_player(player_id)

    def stop(self) -> None:
        """Stop serving and join the loop thread."""
        if self._loop is not None and not self._loop.is_closed():
            self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "ProtocolListener":
        return self.start()

    def __exit__(self, *exc_info: Any) -> None:
        self.stop()
