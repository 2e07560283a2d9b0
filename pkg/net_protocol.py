import json
import math
import socket
import socketserver
import threading
from typing import Annotated, Any, Callable, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError

from env_core import (
    Action,
    ActionValidationError,
    EpisodeLifecycleError,
    GameEnv,
    Observation,
    StepResult,
    observation_from_dict,
    observation_to_dict,
)

PROTOCOL_VERSION = "affectively/1"

# エラーコード
MALFORMED = "malformed"
LIFECYCLE = "lifecycle"
VALIDATION = "validation"
VERSION_MISMATCH = "version_mismatch"
INTERNAL = "internal"


class ProtocolError(RuntimeError):
    """サーバーが error 応答を返した、または応答が読めない"""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class _Message(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: str = PROTOCOL_VERSION


class HelloRequest(_Message):
    type: Literal["hello"] = "hello"


class SpecRequest(_Message):
    type: Literal["spec"] = "spec"


class ResetRequest(_Message):
    type: Literal["reset"] = "reset"
    seed: int


class StepRequest(_Message):
    type: Literal["step"] = "step"
    discrete: List[int]
    continuous: List[float] = Field(default_factory=list)


class CloseRequest(_Message):
    type: Literal["close"] = "close"


Request = Annotated[
    Union[HelloRequest, SpecRequest, ResetRequest, StepRequest, CloseRequest],
    Field(discriminator="type"),
]


class HelloResponse(_Message):
    type: Literal["hello"] = "hello"
    game: str


class SpecResponse(_Message):
    type: Literal["spec"] = "spec"
    game: str
    discrete_branches: List[int]
    continuous_count: int
    grid_shape: Tuple[int, int]
    n_grid_ids: int
    property_size: int
    ticks_per_second: int
    max_ticks: int


class ObservationResponse(_Message):
    type: Literal["observation"] = "observation"
    observation: Dict[str, Any]


class StepResponse(_Message):
    type: Literal["step"] = "step"
    observation: Dict[str, Any]
    score: float
    behaviour_reward: float
    affect_signal: float
    affect_reward: float
    total_reward: float
    done: bool
    tick: int
    affect_emitted: bool
    clamped: bool = False
    warnings: List[str] = Field(default_factory=list)


class ErrorResponse(_Message):
    type: Literal["error"] = "error"
    code: str
    message: str


class ByeResponse(_Message):
    type: Literal["bye"] = "bye"


Response = Annotated[
    Union[HelloResponse, SpecResponse, ObservationResponse, StepResponse, ErrorResponse, ByeResponse],
    Field(discriminator="type"),
]

REQUEST_ADAPTER = TypeAdapter(Request)
RESPONSE_ADAPTER = TypeAdapter(Response)


def encode_message(message: BaseModel) -> bytes:
    """1メッセージ1行のJSON（浮動小数はreprで往復しても同じ値になる）"""
    return (json.dumps(message.model_dump(), ensure_ascii=False) + "\n").encode("utf-8")


def decode_request(line: bytes) -> Union[HelloRequest, SpecRequest, ResetRequest, StepRequest, CloseRequest]:
    return REQUEST_ADAPTER.validate_python(json.loads(line.decode("utf-8")))


def decode_response(line: bytes):
    return RESPONSE_ADAPTER.validate_python(json.loads(line.decode("utf-8")))


def clamp_continuous(values: List[float]) -> Tuple[Tuple[float, ...], List[str]]:
    """連続値を[-1, 1]にクランプする。非有限値はクランプせず検証エラーにする"""
    clamped, warnings = [], []
    for slot, value in enumerate(values):
        if not math.isfinite(value):
            raise ActionValidationError(f"連続行動が有限ではありません: slot={slot}, value={value}")
        bounded = min(1.0, max(-1.0, value))
        if bounded != value:
            warnings.append(f"continuous[{slot}] を {value} から {bounded} にクランプしました")
        clamped.append(bounded)
    return tuple(clamped), warnings


def step_response(result: StepResult, warnings: List[str]) -> StepResponse:
    payload = result.to_dict()
    return StepResponse(**payload, clamped=bool(warnings), warnings=warnings)


class Session:
    """1接続ぶんの環境とリクエスト処理（接続間で何も共有しない）"""

    def __init__(self, env_factory: Callable[[], GameEnv]):
        self.env_factory = env_factory
        self.env: Optional[GameEnv] = None

    def handle(self, request) -> BaseModel:
        # 環境は最初のリクエストで作る。失敗はそのリクエストへのinternal応答になる
        if self.env is None:
            self.env = self.env_factory()
        env = self.env
        if isinstance(request, HelloRequest):
            return HelloResponse(game=env.game_id)
        if isinstance(request, SpecRequest):
            return SpecResponse(
                game=env.game_id,
                discrete_branches=list(env.action_spec.discrete_branches),
                continuous_count=env.action_spec.continuous_count,
                grid_shape=env.grid_shape,
                n_grid_ids=env.n_grid_ids,
                property_size=env.observed_property_size,
                ticks_per_second=env.ticks_per_second,
                max_ticks=env.clock.max_ticks,
            )
        if isinstance(request, ResetRequest):
            return ObservationResponse(observation=observation_to_dict(env.reset(request.seed)))
        if isinstance(request, StepRequest):
            continuous, warnings = clamp_continuous(request.continuous)
            result = env.step(Action(discrete=tuple(request.discrete), continuous=continuous))
            return step_response(result, warnings)
        return ByeResponse()


class ConnectionHandler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        self.session = Session(self.server.env_factory)
        self.server.connection_opened()
        print(f"接続を受け付けました: {self.client_address} (接続数={self.server.open_connections})")

    def handle(self):
        for line in self.rfile:
            if not line.strip():
                continue
            response, close = self._respond(line)
            self.wfile.write(encode_message(response))
            self.wfile.flush()
            if close:
                break

    def _respond(self, line: bytes) -> Tuple[BaseModel, bool]:
        try:
            raw = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            return ErrorResponse(code=MALFORMED, message=f"JSONとして読めません: {e}"), False
        if not isinstance(raw, dict):
            return ErrorResponse(code=MALFORMED, message="メッセージはJSONオブジェクトが必要です"), False
        if raw.get("version") != PROTOCOL_VERSION:
            message = f"プロトコルのバージョンが一致しません: 期待={PROTOCOL_VERSION}, 実際={raw.get('version')}"
            return ErrorResponse(code=VERSION_MISMATCH, message=message), True
        try:
            request = REQUEST_ADAPTER.validate_python(raw)
        except ValidationError as e:
            return ErrorResponse(code=MALFORMED, message=f"メッセージが不正です: {e}"), False
        try:
            response = self.session.handle(request)
        except EpisodeLifecycleError as e:
            return ErrorResponse(code=LIFECYCLE, message=str(e)), False
        except ActionValidationError as e:
            return ErrorResponse(code=VALIDATION, message=str(e)), False
        except Exception as e:
            # ハンドラーの外に例外を出さない
            return ErrorResponse(code=INTERNAL, message=f"{type(e).__name__}: {e}"), False
        return response, isinstance(request, CloseRequest)

    def finish(self):
        try:
            super().finish()
        finally:
            self.server.connection_closed()
            print(f"接続を閉じました: {self.client_address} (接続数={self.server.open_connections})")


class AffectivelyServer(socketserver.ThreadingTCPServer):
    """接続ごとに env_factory() で新しい環境を作るTCPサーバー"""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: Tuple[str, int], env_factory: Callable[[], GameEnv]):
        super().__init__(address, ConnectionHandler)
        self.env_factory = env_factory
        self.open_connections = 0
        self._lock = threading.Lock()

    def connection_opened(self) -> None:
        with self._lock:
            self.open_connections += 1

    def connection_closed(self) -> None:
        with self._lock:
            self.open_connections -= 1


def serve(host: str, port: int, env_factory: Callable[[], GameEnv]) -> AffectivelyServer:
    """
    サーバーをバックグラウンドスレッドで起動する

    引数:
        host: バインドするアドレス
        port: ポート（0なら空いているポート）
        env_factory: 接続ごとに呼ばれる環境の生成関数

    戻り値:
        AffectivelyServer: 起動済みのサーバー（shutdown()で停止）
    """
    server = AffectivelyServer((host, port), env_factory)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    bound_host, bound_port = server.server_address[:2]
    print(f"プロトコルサーバーを起動しました: {bound_host}:{bound_port} ({PROTOCOL_VERSION})")
    return server


class RemoteEnv:
    """サーバー上の環境をローカルのGameEnvと同じ reset / step で操作するクライアント"""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")
        hello = self.request(HelloRequest())
        self.game_id = hello.game
        self.spec = self.request(SpecRequest())
        self.grid_shape = tuple(self.spec.grid_shape)
        self.last_warnings: List[str] = []

    def request(self, message: BaseModel):
        self.sock.sendall(encode_message(message))
        line = self.rfile.readline()
        if not line:
            raise ProtocolError(MALFORMED, "サーバーが接続を閉じました")
        response = decode_response(line)
        if isinstance(response, ErrorResponse):
            if response.code == LIFECYCLE:
                raise EpisodeLifecycleError(response.message)
            if response.code == VALIDATION:
                raise ActionValidationError(response.message)
            raise ProtocolError(response.code, response.message)
        return response

    def reset(self, seed: int) -> Observation:
        response = self.request(ResetRequest(seed=seed))
        return observation_from_dict(response.observation, self.grid_shape)

    def step(self, action: Action) -> StepResult:
        response = self.request(StepRequest(discrete=list(action.discrete), continuous=list(action.continuous)))
        self.last_warnings = response.warnings
        return StepResult(
            observation=observation_from_dict(response.observation, self.grid_shape),
            score=response.score,
            behaviour_reward=response.behaviour_reward,
            affect_signal=response.affect_signal,
            affect_reward=response.affect_reward,
            total_reward=response.total_reward,
            done=response.done,
            tick=response.tick,
            affect_emitted=response.affect_emitted,
        )

    def close(self) -> None:
        try:
            self.request(CloseRequest())
        except (ProtocolError, OSError):
            pass
        finally:
            self.rfile.close()
            self.sock.close()

    def __enter__(self) -> "RemoteEnv":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
