"""
LLM Gateway for the Financial QA Agent Framework.
Provides a backend-agnostic chat-completion client:
- OpenAI-compatible HTTP backends (OpenAI, Gemini's compatibility endpoint,
  vLLM/Ollama servers hosting open-weight models) through the openai SDK
- A deterministic scripted backend for tests and offline demos

Applies the inference defaults used for every experiment (temperature 0.1,
1000 completion tokens), retries rate-limited calls with exponential backoff,
and keeps usage statistics for cost accounting.
"""

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union
from urllib.parse import urlparse

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.1
DEFAULT_MAX_TOKENS = 1000

# Keys that must never be logged verbatim when --trace-io is active.
_REDACTED_HEADERS = ('authorization', 'api-key', 'x-api-key')


class GatewayError(Exception):
    """Base class for chat-completion failures."""


class NetworkError(GatewayError):
    """Transport-level failure (connection refused, timeout, 5xx)."""


class AuthError(GatewayError):
    """Credentials missing or rejected (401/403). Never retried."""


class RateLimited(GatewayError):
    """Backend asked us to slow down (429)."""


class ContextOverflow(GatewayError):
    """Prompt exceeds the backend's context window; caller should trim evidence."""


class MalformedResponse(GatewayError):
    """Backend replied with something that is not a chat completion."""


class ScriptMiss(MalformedResponse):
    """Scripted backend has no entry for a call tag."""


class ChatRole(Enum):
    """Roles allowed in a chat message."""
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: ChatRole
    content: str

    def __post_init__(self):
        if not isinstance(self.role, ChatRole):
            object.__setattr__(self, 'role', ChatRole(self.role))
        if not self.content or not self.content.strip():
            raise ValueError(f"{self.role.value} message content must be non-empty")

    def to_wire(self) -> Dict[str, str]:
        return {'role': self.role.value, 'content': self.content}


@dataclass(frozen=True)
class CallTag:
    """
    Identifies which agent made a call, for which question and on which pass.
    Scripted backends key their replies on these tags.
    """
    agent: str
    question_id: Optional[str] = None
    pass_index: int = 0

    @property
    def keys(self) -> List[str]:
        """Lookup keys from most to least specific."""
        keys = []
        if self.question_id is not None:
            keys.append(f"{self.agent}:{self.question_id}:{self.pass_index}")
            keys.append(f"{self.agent}:{self.question_id}")
        keys.append(self.agent)
        return keys

    def __str__(self) -> str:
        return self.keys[0]


@dataclass(frozen=True)
class ChatRequest:
    """
    One chat-completion request. Messages are validated on construction:
    non-empty, and at most one system message which must come first.
    """
    messages: Sequence[ChatMessage]
    model: Optional[str] = None
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    tag: Optional[CallTag] = None

    def __post_init__(self):
        object.__setattr__(self, 'messages', tuple(self.messages))
        if not self.messages:
            raise ValueError("ChatRequest requires at least one message")
        system_positions = [i for i, m in enumerate(self.messages) if m.role == ChatRole.SYSTEM]
        if len(system_positions) > 1:
            raise ValueError("At most one system message is allowed per request")
        if system_positions and system_positions[0] != 0:
            raise ValueError("The system message must be the first message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be within [0, 2], got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")

    @property
    def prompt_text(self) -> str:
        return "\n\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    usage_missing: bool = False

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("Token counts must be non-negative")
        if self.latency_ms < 0:
            raise ValueError("Latency must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class BackendProfile:
    """
    Connection settings for one chat backend.

    The API key is never part of the profile; `auth_env_var` names the
    environment variable that holds it.
    """
    name: str
    endpoint: str
    model: str
    auth_env_var: Optional[str] = None
    supports_system_prompt: bool = True
    requests_per_minute: int = 0
    timeout_s: float = 60.0
    price_per_1k_prompt: float = 0.0
    price_per_1k_completion: float = 0.0

    def __post_init__(self):
        parsed = urlparse(self.endpoint)
        if parsed.scheme not in ('http', 'https', 'scripted') or not (parsed.netloc or parsed.scheme == 'scripted'):
            raise ValueError(f"Backend '{self.name}' has a malformed endpoint: {self.endpoint!r}")

    def api_key(self) -> Optional[str]:
        if not self.auth_env_var:
            return None
        return os.getenv(self.auth_env_var) or None

    def estimate_cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        return (prompt_tokens * self.price_per_1k_prompt + completion_tokens * self.price_per_1k_completion) / 1000


@dataclass(frozen=True)
class CallRecord:
    """
    Accounting record of one completed backend call, as stored in traces.
    Digests are sha256 hex over the wire payload and the reply text.
    """
    agent: str
    pass_index: int
    request_digest: str
    response_digest: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: int
    usage_missing: bool = False
    request_body: Optional[Dict[str, Any]] = None
    response_body: Optional[str] = None

    @classmethod
    def from_exchange(cls, profile: 'BackendProfile', request: ChatRequest, response: ChatResponse,
                      include_bodies: bool = False) -> 'CallRecord':
        payload = build_payload(profile, request)
        tag = request.tag or CallTag(agent='unknown')
        return cls(
            agent=tag.agent,
            pass_index=tag.pass_index,
            request_digest=digest_payload(payload),
            response_digest=digest_text(response.content),
            prompt_tokens=response.prompt_tokens,
            completion_tokens=response.completion_tokens,
            latency_ms=response.latency_ms,
            usage_missing=response.usage_missing,
            request_body=payload if include_bodies else None,
            response_body=response.content if include_bodies else None,
        )

    def to_dict(self) -> Dict[str, Any]:
        record = {
            'agent': self.agent,
            'pass_index': self.pass_index,
            'request_digest': self.request_digest,
            'response_digest': self.response_digest,
            'prompt_tokens': self.prompt_tokens,
            'completion_tokens': self.completion_tokens,
            'latency_ms': self.latency_ms,
        }
        if self.usage_missing:
            record['usage_missing'] = True
        if self.request_body is not None:
            record['request_body'] = self.request_body
            record['response_body'] = self.response_body
        return record


def build_payload(profile: BackendProfile, request: ChatRequest) -> Dict[str, Any]:
    """
    Serialize a request into the OpenAI chat-completions wire shape.

    Args:
        profile: Backend the request is addressed to (supplies the default model)
        request: The chat request

    Returns:
        JSON-serializable payload dictionary
    """
    return {
        'model': request.model or profile.model,
        'messages': [m.to_wire() for m in request.messages],
        'temperature': request.temperature,
        'max_tokens': request.max_tokens,
    }


def digest_payload(payload: Mapping[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(',', ':'))
    return digest_text(canonical)


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def redact(value: Any, secrets: Sequence[str] = ()) -> Any:
    """Return a copy of a logged structure with auth headers and known secrets masked."""
    if isinstance(value, dict):
        return {
            k: ('***' if str(k).lower() in _REDACTED_HEADERS else redact(v, secrets))
            for k, v in value.items()
        }
    if isinstance(value, list):
        return [redact(v, secrets) for v in value]
    if isinstance(value, str):
        for secret in secrets:
            if secret:
                value = value.replace(secret, '***')
        return value
    return value


class ChatBackend:
    """Interface implemented by every chat backend."""

    def __init__(self, profile: BackendProfile):
        self.profile = profile

    def complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


class OpenAICompatibleBackend(ChatBackend):
    """
    Chat backend speaking the OpenAI chat-completions protocol.
    Works for OpenAI itself and for any server exposing the same shape.
    """

    def __init__(self, profile: BackendProfile, client: Any = None):
        super().__init__(profile)
        self._client = client

    @property
    def client(self):
        if self._client is None:
            api_key = self.profile.api_key()
            if self.profile.auth_env_var and not api_key:
                raise AuthError(
                    f"Environment variable {self.profile.auth_env_var} is not set "
                    f"(required by backend '{self.profile.name}')"
                )
            import openai
            # Retries are handled by the gateway so the policy stays in one place.
            self._client = openai.OpenAI(
                api_key=api_key or "EMPTY",
                base_url=self.profile.endpoint,
                timeout=self.profile.timeout_s,
                max_retries=0,
            )
        return self._client

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = build_payload(self.profile, request)
        client = self.client
        start = time.perf_counter()
        try:
            response = client.chat.completions.create(**payload)
        except Exception as e:
            raise translate_openai_error(e) from e
        latency_ms = int((time.perf_counter() - start) * 1000)

        try:
            content = response.choices[0].message.content
        except (AttributeError, IndexError, TypeError) as e:
            raise MalformedResponse(f"Backend '{self.profile.name}' returned no choices: {e}") from e
        if content is None:
            raise MalformedResponse(f"Backend '{self.profile.name}' returned an empty message")

        usage = getattr(response, 'usage', None)
        prompt_tokens = getattr(usage, 'prompt_tokens', None) if usage is not None else None
        completion_tokens = getattr(usage, 'completion_tokens', None) if usage is not None else None
        usage_missing = prompt_tokens is None or completion_tokens is None
        if usage_missing:
            logger.warning(f"Backend '{self.profile.name}' reply carried no token usage; recording 0")

        return ChatResponse(
            content=content,
            prompt_tokens=int(prompt_tokens or 0),
            completion_tokens=int(completion_tokens or 0),
            latency_ms=latency_ms,
            usage_missing=usage_missing,
        )


def translate_openai_error(exc: Exception) -> GatewayError:
    """
    Map an openai SDK exception onto the gateway's error classes.

    Args:
        exc: Exception raised by the openai client

    Returns:
        The matching GatewayError instance
    """
    if isinstance(exc, GatewayError):
        return exc
    try:
        import openai
    except ImportError:  # pragma: no cover
        return NetworkError(str(exc))

    if isinstance(exc, (openai.AuthenticationError, openai.PermissionDeniedError)):
        return AuthError(str(exc))
    if isinstance(exc, openai.RateLimitError):
        return RateLimited(str(exc))
    if isinstance(exc, openai.BadRequestError):
        code = getattr(exc, 'code', None) or ''
        message = str(exc)
        if 'context_length' in code or 'context length' in message.lower() or 'maximum context' in message.lower():
            return ContextOverflow(message)
        return MalformedResponse(message)
    if isinstance(exc, (openai.APIConnectionError, openai.APITimeoutError, openai.InternalServerError)):
        return NetworkError(str(exc))
    if isinstance(exc, openai.APIStatusError):
        return NetworkError(str(exc))
    return MalformedResponse(str(exc))


@dataclass(frozen=True)
class ScriptedCall:
    tag: Optional[CallTag]
    request: ChatRequest
    response: str


class ScriptedBackend(ChatBackend):
    """
    Deterministic backend replying from a tag → text script.

    A reply is looked up with the call tag's keys from most to least specific,
    so {"BG": "..."} answers every Base Generator call while
    {"BG:q17:1": "..."} targets the second pass on question q17. Every
    completed request is appended to `call_log` under a lock.
    """

    def __init__(self, script: Mapping[str, str], profile: Optional[BackendProfile] = None,
                 max_prompt_chars: Optional[int] = None):
        super().__init__(profile or BackendProfile(name='scripted', endpoint='scripted://local', model='scripted'))
        self.script = dict(script)
        self.max_prompt_chars = max_prompt_chars
        self.call_log: List[ScriptedCall] = []
        self._lock = threading.Lock()

    def lookup(self, tag: Optional[CallTag]) -> str:
        keys = tag.keys if tag is not None else []
        for key in keys:
            if key in self.script:
                return self.script[key]
        raise ScriptMiss(f"No scripted reply for tag {tag}")

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = request.prompt_text
        if self.max_prompt_chars is not None and len(prompt) > self.max_prompt_chars:
            raise ContextOverflow(
                f"Prompt of {len(prompt)} chars exceeds scripted window of {self.max_prompt_chars}"
            )
        content = self.lookup(request.tag)
        with self._lock:
            self.call_log.append(ScriptedCall(tag=request.tag, request=request, response=content))
        # Whitespace word counts stand in for tokens on the scripted backend.
        return ChatResponse(
            content=content,
            prompt_tokens=len(prompt.split()),
            completion_tokens=len(content.split()),
            latency_ms=0,
        )

    def agents_called(self) -> List[str]:
        with self._lock:
            return [c.tag.agent if c.tag else 'unknown' for c in self.call_log]


def scripted_backend(script: Mapping[str, str], supports_system_prompt: bool = True,
                     max_prompt_chars: Optional[int] = None) -> ScriptedBackend:
    """
    Build a scripted backend from a tag → reply mapping.

    Args:
        script: Mapping of call-tag keys ("BG", "BG:q17", "BG:q17:1") to reply text
        supports_system_prompt: Capability flag reported by the backend's profile
        max_prompt_chars: Optional simulated context window

    Returns:
        ScriptedBackend instance
    """
    profile = BackendProfile(
        name='scripted',
        endpoint='scripted://local',
        model='scripted',
        supports_system_prompt=supports_system_prompt,
    )
    return ScriptedBackend(script, profile=profile, max_prompt_chars=max_prompt_chars)


@dataclass
class RetryPolicy:
    """Exponential backoff applied to RateLimited errors."""
    max_retries: int = 3
    initial_delay_s: float = 1.0
    factor: float = 2.0

    def delays(self) -> List[float]:
        return [self.initial_delay_s * (self.factor ** i) for i in range(self.max_retries)]


class RateLimiter:
    """Spaces out requests to respect a requests-per-minute budget."""

    def __init__(self, requests_per_minute: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.min_interval = 60.0 / requests_per_minute if requests_per_minute > 0 else 0.0
        self._clock = clock
        self._sleep = sleep
        self._next_slot = 0.0
        self._lock = threading.Lock()

    def acquire(self):
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self._clock()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + self.min_interval
        if wait > 0:
            self._sleep(wait)


class LLMGateway:
    """
    Shared entry point for all chat completions.
    Wraps one backend with the retry policy, rate limiting, I/O tracing and
    usage statistics. Safe to share across worker threads.
    """

    def __init__(self, backend: ChatBackend, retry_policy: Optional[RetryPolicy] = None,
                 trace_io: bool = False, sleep: Callable[[float], None] = time.sleep):
        """
        Initialize the gateway.

        Args:
            backend: Backend that performs the actual completion
            retry_policy: Backoff policy for RateLimited errors (defaults to 3 retries, 1s, x2)
            trace_io: Log full request/response bodies (auth redacted) at DEBUG
            sleep: Sleep function, injectable for tests
        """
        self.backend = backend
        self.retry_policy = retry_policy or RetryPolicy()
        self.trace_io = trace_io
        self._sleep = sleep
        self._rate_limiter = RateLimiter(backend.profile.requests_per_minute, sleep=sleep)
        self._stats_lock = threading.Lock()
        self.usage_stats = {
            'total_requests': 0,
            'successful_requests': 0,
            'failed_requests': 0,
            'retries': 0,
            'prompt_tokens': 0,
            'completion_tokens': 0,
            'usage_missing': 0,
            'estimated_cost': 0.0,
        }

    @property
    def profile(self) -> BackendProfile:
        return self.backend.profile

    def complete(self, request: ChatRequest) -> ChatResponse:
        """
        Run one chat completion.

        Args:
            request: The chat request (not mutated)

        Returns:
            ChatResponse with assistant content and usage

        Raises:
            AuthError: Credentials rejected, raised immediately
            RateLimited: Still rate-limited after all retries
            NetworkError, ContextOverflow, MalformedResponse: Propagated unchanged
        """
        delays = self.retry_policy.delays()
        attempt = 0
        while True:
            self._rate_limiter.acquire()
            self._log_request(request)
            try:
                response = self.backend.complete(request)
            except RateLimited as e:
                if attempt >= len(delays):
                    self._record_failure()
                    logger.error(f"Rate limited on {request.tag} after {attempt} retries")
                    raise
                delay = delays[attempt]
                attempt += 1
                with self._stats_lock:
                    self.usage_stats['retries'] += 1
                logger.warning(f"Rate limited on {request.tag}; retry {attempt}/{len(delays)} in {delay:.1f}s")
                self._sleep(delay)
                continue
            except GatewayError:
                self._record_failure()
                raise

            self._log_response(request, response)
            self._record_success(response)
            return response

    def _record_failure(self):
        with self._stats_lock:
            self.usage_stats['total_requests'] += 1
            self.usage_stats['failed_requests'] += 1

    def _record_success(self, response: ChatResponse):
        with self._stats_lock:
            stats = self.usage_stats
            stats['total_requests'] += 1
            stats['successful_requests'] += 1
            stats['prompt_tokens'] += response.prompt_tokens
            stats['completion_tokens'] += response.completion_tokens
            if response.usage_missing:
                stats['usage_missing'] += 1
            stats['estimated_cost'] += self.profile.estimate_cost(response.prompt_tokens, response.completion_tokens)

    def _log_request(self, request: ChatRequest):
        if not self.trace_io:
            return
        payload = build_payload(self.profile, request)
        secrets = [self.profile.api_key() or '']
        logger.debug(f"-> {self.profile.name} [{request.tag}] {json.dumps(redact(payload, secrets), ensure_ascii=False)}")

    def _log_response(self, request: ChatRequest, response: ChatResponse):
        if not self.trace_io:
            return
        secrets = [self.profile.api_key() or '']
        logger.debug(
            f"<- {self.profile.name} [{request.tag}] {response.latency_ms}ms "
            f"tokens={response.prompt_tokens}/{response.completion_tokens} {redact(response.content, secrets)}"
        )

    def get_usage_statistics(self) -> Dict[str, Any]:
        """
        Get usage statistics and cost estimation.

        Returns:
            Dictionary of counters plus success rate and the active backend name
        """
        with self._stats_lock:
            stats = dict(self.usage_stats)
        total = stats['total_requests']
        stats['success_rate'] = (stats['successful_requests'] / total * 100) if total else 0.0
        stats['backend'] = self.profile.name
        stats['model'] = self.profile.model
        return stats


def create_backend(profile: BackendProfile, script: Optional[Mapping[str, str]] = None) -> ChatBackend:
    """
    Instantiate the backend for a profile.

    Args:
        profile: Backend profile
        script: Reply script, required when the profile uses the scripted:// scheme

    Returns:
        ChatBackend instance
    """
    if profile.endpoint.startswith('scripted://'):
        if script is None:
            raise ValueError(f"Backend '{profile.name}' is scripted but no script was provided")
        return ScriptedBackend(script, profile=profile)
    return OpenAICompatibleBackend(profile)


def complete(backend: Union[LLMGateway, ChatBackend], request: ChatRequest) -> ChatResponse:
    """Convenience wrapper: complete a request on a gateway or bare backend."""
    if isinstance(backend, LLMGateway):
        return backend.complete(request)
    return LLMGateway(backend).complete(request)
