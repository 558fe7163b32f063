"""
Prompt Templates Loader.
Centralized template management for extraction prompts and instruction tasks.
"""
import json
import os
import logging
from typing import Dict

logger = logging.getLogger(__name__)


class PromptTemplates:
    """Singleton class to load and format prompt templates from JSON."""

    _instance = None
    _templates = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(PromptTemplates, cls).__new__(cls)
            cls._instance._load_templates()
        return cls._instance

    def _load_templates(self):
        """Load templates from JSON file."""
        current_dir = os.path.dirname(os.path.abspath(__file__))
        config_dir = os.path.join(os.path.dirname(current_dir), 'config')
        templates_file = os.path.join(config_dir, 'prompt_templates.json')

        with open(templates_file, 'r', encoding='utf-8') as f:
            self._templates: Dict[str, Dict[str, str]] = json.load(f)

        logger.debug(f"Prompt templates loaded from {templates_file}")

    def raw(self, category: str, key: str) -> str:
        """Get the unformatted template text."""
        try:
            return self._templates[category][key]
        except KeyError:
            raise KeyError(f"Unknown template {category}.{key}") from None

    def get(self, category: str, key: str, /, **kwargs) -> str:
        """
        Get a formatted template.

        Args:
            category: Template category (extraction, recommendation, alignment)
            key: Template key
            **kwargs: Slot values

        Returns:
            Rendered text
        """
        template = self.raw(category, key)
        return template.format(**kwargs) if kwargs else template

    def extraction(self, key: str, /, **kwargs) -> str:
        """Get semantic extraction template."""
        return self.get('extraction', key, **kwargs)

    def recommendation(self, key: str, **kwargs) -> str:
        """Get recommendation task template."""
        return self.get('recommendation', key, **kwargs)

    def alignment(self, key: str, **kwargs) -> str:
        """Get token alignment task template."""
        return self.get('alignment', key, **kwargs)


# Global instance
templates = PromptTemplates()
