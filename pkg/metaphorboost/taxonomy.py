from enum import Enum
from typing import Optional

from .errors import InputError


class TaxonomyError(InputError):
    pass


def _canonical(name: str) -> str:
    return '_'.join(name.replace('-', ' ').replace('.', ' ').lower().split())


class _Labeled(Enum):
    @classmethod
    def parse(cls, name: str):
        '''
        Accepts the enum value, the member name or the display title, case-insensitively
        '''
        key = _canonical(str(name))
        for member in cls:
            if key in (member.value, member.name.lower(), _canonical(member.title)):
                return member
        raise TaxonomyError(f'unknown {cls.__name__} {name!r}')

    @classmethod
    def parse_optional(cls, name: Optional[str]):
        return None if name in (None, '') else cls.parse(name)


class MetaphorType(_Labeled):
    BODY_LANGUAGE = 'body_language'
    ATMOSPHERE_LANGUAGE = 'atmosphere_language'
    CULTURAL_SYMBOL = 'cultural_symbol'
    NATURALISTIC_SYMBOL = 'naturalistic_symbol'
    CAUSAL_MONTAGE = 'causal_montage'
    ANALOGICAL_MONTAGE = 'analogical_montage'
    SURREAL_NARRATIVE = 'surreal_narrative'
    PERFORMATIVE_NARRATIVE = 'performative_narrative'

    @property
    def title(self) -> str:
        return self.value.replace('_', ' ').title()

    @property
    def short(self) -> str:
        return _SHORT_LABELS[self]


_SHORT_LABELS = {
    MetaphorType.BODY_LANGUAGE: 'Body L.',
    MetaphorType.ATMOSPHERE_LANGUAGE: 'Atmosph. L.',
    MetaphorType.CULTURAL_SYMBOL: 'Cultural S.',
    MetaphorType.NATURALISTIC_SYMBOL: 'Natural. S.',
    MetaphorType.CAUSAL_MONTAGE: 'Causal M.',
    MetaphorType.ANALOGICAL_MONTAGE: 'Analog. M.',
    MetaphorType.SURREAL_NARRATIVE: 'Surreal N.',
    MetaphorType.PERFORMATIVE_NARRATIVE: 'Perform. N.',
}


class DeficiencyCategory(_Labeled):
    WRONG_RECOGNITION = 'wrong_recognition'
    MISSING_MAPPING = 'missing_mapping'
    SUPERFICIAL_MAPPING = 'superficial_mapping'
    IMPROPER_MAPPING = 'improper_mapping'

    @property
    def title(self) -> str:
        return self.value.replace('_', ' ').capitalize()
