"""
Remote Semantic Extraction API Service.
Sends rendered extraction prompts to an LLM endpoint and parses
{description, keywords} answers.
"""
import json
import logging
import os
import re
import time
from typing import Any, Dict, Optional

import requests

from src.config.settings import ExtractorConfig
from src.exceptions.base import ConfigError, ExternalServiceError, ExtractionError
from src.utils.error_handling import correlation_context, retry_with_backoff
from src.utils.prompt_templates import templates
from src.utils.rate_limiter import RateLimiter
from src.utils.string_utils import normalize_keywords, truncate_string

logger = logging.getLogger(__name__)

_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.IGNORECASE)


def _is_chat_endpoint(endpoint: str) -> bool:
    return endpoint.rstrip("/").endswith("/chat/completions")


def parse_semantics_response(payload: Any) -> Dict[str, Any]:
    """
    Map a response body to {description, keywords}.

    Accepts the plain shape or a chat-completion body whose first choice's
    message content holds that JSON (optionally inside a ``` fence).
    """
    if isinstance(payload, dict) and "choices" in payload:
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ExternalServiceError("chat completion without message content", service="extractor") from None
        try:
            payload = json.loads(_FENCE.sub("", content.strip()))
        except (json.JSONDecodeError, AttributeError):
            raise ExternalServiceError(
                f"message content is not JSON: {truncate_string(str(content), 120)}", service="extractor") from None

    if not isinstance(payload, dict):
        raise ExternalServiceError("response is not a JSON object", service="extractor")
    description = payload.get("description")
    keywords = payload.get("keywords")
    if not isinstance(description, str) or not description.strip():
        raise ExternalServiceError("response lacks a non-empty description", service="extractor")
    if not isinstance(keywords, list) or not all(isinstance(k, str) for k in keywords):
        raise ExternalServiceError("response keywords must be a list of strings", service="extractor")
    return {"description": description.strip(), "keywords": normalize_keywords(keywords)}


class SemanticAPIService:
    """Client for the remote semantic extractor."""

    def __init__(self, cfg: ExtractorConfig, session: Optional[requests.Session] = None):
        self.endpoint = cfg.endpoint
        self.model = cfg.model
        self.timeout = cfg.timeout
        self.max_retries = cfg.max_retries
        self.backoff = cfg.backoff
        self.api_key = os.getenv(cfg.api_key_env)
        if not self.api_key:
            raise ConfigError(f"Remote extractor needs an API key in ${cfg.api_key_env}", key="EXTRACTOR_API_KEY_ENV")

        self.session = session or requests.Session()
        self.rate_limiter = RateLimiter(max_calls=cfg.rate_per_second, time_window=1.0)
        self.calls = 0
        logger.info(f"Semantic API service initialized for {self.endpoint} (model {self.model})")

    def _get_headers(self) -> Dict[str, str]:
        return {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}

    def _body(self, prompt: str) -> Dict[str, Any]:
        # The rendered prompt is sent as-is; the answer shape travels beside it
        response_format = templates.extraction("response_format")
        if _is_chat_endpoint(self.endpoint):
            return {
                "model": self.model,
                "messages": [{"role": "system", "content": response_format},
                             {"role": "user", "content": prompt}],
                "temperature": 0,
            }
        return {"model": self.model, "prompt": f"{prompt}\n\n{response_format}"}

    @retry_with_backoff(exceptions=(requests.RequestException, ExternalServiceError))
    def _post(self, prompt: str) -> Dict[str, Any]:
        self.rate_limiter.wait()
        start_time = time.time()
        self.calls += 1
        response = self.session.post(self.endpoint, json=self._body(prompt),
                                     headers=self._get_headers(), timeout=self.timeout)
        api_time = time.time() - start_time
        logger.debug(f"API Response Time: {api_time:.2f}s, Status: {response.status_code}")

        if response.status_code != 200:
            raise ExternalServiceError(
                f"status {response.status_code}: {truncate_string(response.text, 200)}",
                service="extractor", details={"status": response.status_code})
        try:
            payload = response.json()
        except ValueError:
            raise ExternalServiceError(f"non-JSON body: {truncate_string(response.text, 200)}",
                                       service="extractor") from None
        return parse_semantics_response(payload)

    def extract(self, prompt: str, token: str = "") -> Dict[str, Any]:
        """
        Send one extraction prompt.

        Returns:
            {description, keywords}

        Raises:
            ExtractionError: every attempt failed
        """
        correlation_id = correlation_context.get_correlation_id()
        try:
            return self._post(prompt, _max_retries=self.max_retries, _backoff_factor=self.backoff)
        except (requests.RequestException, ExternalServiceError) as e:
            logger.error(f"[{correlation_id}] Extraction failed for {token or 'prompt'}: {e}")
            raise ExtractionError(f"remote extraction failed for {token or 'prompt'} after "
                                  f"{self.max_retries + 1} attempts: {e}", details={"token": token}) from e

    def close(self):
        self.session.close()
