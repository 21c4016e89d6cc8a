from pathlib import Path
from typing import Any, Optional, Tuple, Union

import jinja2

from .errors import InputError


_PACKAGED = Path(__file__).resolve().parent / 'templates'


class TemplateError(InputError):
    pass


class PromptTemplates:
    '''
    Renders `<name>.system.j2` / `<name>.user.j2` prompt pairs.

    Templates in `templates_dir` shadow the packaged defaults, so operators can edit prompt
    wording without touching code. Undefined variables are errors.
    '''

    def __init__(self, templates_dir: Optional[Union[str, Path]] = None):
        loaders = []
        if templates_dir is not None:
            if not Path(templates_dir).is_dir():
                raise TemplateError(f'templates directory {templates_dir} does not exist')
            loaders.append(jinja2.FileSystemLoader(str(templates_dir)))
        loaders.append(jinja2.FileSystemLoader(str(_PACKAGED)))
        self.env = jinja2.Environment(
            loader=jinja2.ChoiceLoader(loaders),
            autoescape=False,
            undefined=jinja2.StrictUndefined,
            keep_trailing_newline=False,
        )

    def render(self, name: str, **variables: Any) -> Tuple[str, str]:
        '''
        Returns the rendered `(system, user)` texts of prompt `name`
        '''
        try:
            system = self.env.get_template(f'{name}.system.j2').render(**variables)
            user = self.env.get_template(f'{name}.user.j2').render(**variables)
        except jinja2.TemplateNotFound as e:
            raise TemplateError(f'missing prompt template {e.name}') from e
        except jinja2.UndefinedError as e:
            raise TemplateError(f'prompt {name!r}: {e.message}') from e
        return system.strip(), user.strip()
