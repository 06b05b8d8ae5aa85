from paced_gsp.config.settings import Settings, settings

__all__ = ["Settings", "settings"]
