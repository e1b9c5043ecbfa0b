from cli.commands import app
from core.config import settings
from core.logging import logger


def main():
    logger.debug(f"Starting {settings.APP_TITLE} {settings.APP_VERSION}")
    app()


if __name__ == "__main__":
    main()
