from __future__ import annotations
import click


class MessageBox:
    """MessageBox object for showing one-line messages and failures to the user on the terminal."""

    def __init__(self):
        """Constructor initialisation for MessageBox."""
        self.text = ""
        self.error = False

    def set_text(self, text: str) -> MessageBox:
        """Method for setting the text of a message box.

        Args:
            text (str): String for the text of the message box.

        Returns:
            MessageBox: MessageBox object.
        """
        self.text = " ".join(str(text).split())
        return self

    def set_exception(self, exception: BaseException) -> MessageBox:
        """Method for turning an exception into the single-line `error=<ClassName> message=<text>` form.

        Args:
            exception (BaseException): Failure to report.

        Returns:
            MessageBox: MessageBox object.
        """
        message = " ".join(str(exception).split())
        self.text = f"error={type(exception).__name__} message={message}"
        self.error = True
        return self

    def show(self) -> None:
        """Echo the message; failures go to stderr."""
        click.echo(self.text, err=self.error)
