from sly import Lexer
from graspflow.error import ConfigError
import re


def regex(s):
    return re.escape(s)


class ConfigLexer(Lexer):
    '''
        Tokens of the run configuration language: `[section]` headers,
        `key = value` assignments, numbers, quoted strings, booleans,
        bare words and arrays. `#` starts a comment.
    '''

    keywords = {
        'true': 'TRUE',
        'false': 'FALSE',
    }

    tokens = {
        EQUAL,
        LSQUARE,
        RSQUARE,
        COMMA,
        NUMBER,
        STRING,
        NAME,
    } | set(keywords.values())

    ignore = ' \t\r'

    ignore_comment = r'\#[^\n]*'

    EQUAL = regex('=')
    LSQUARE = regex('[')
    RSQUARE = regex(']')
    COMMA = regex(',')

    NUMBER = r'[-+]?(\d+\.\d*|\.\d+|\d+)([eE][-+]?\d+)?(?![A-Za-z_])'
    STRING = r'"[^"\n]*"'
    NAME = r'[A-Za-z_][A-Za-z0-9_\-\.]*'

    ignore_newline = r'\n+'

    def NAME(self, t):
        t.type = ConfigLexer.keywords.get(t.value, 'NAME')
        return t

    def NUMBER(self, t):
        text = t.value
        if re.fullmatch(r'[-+]?\d+', text):
            t.value = int(text)
        else:
            t.value = float(text)
        return t

    def STRING(self, t):
        t.value = t.value[1:-1]
        return t

    def ignore_newline(self, t):
        self.lineno += t.value.count('\n')

    def error(self, t):
        msg = 'Illegal character {} at line {}'.format(t.value[0], self.lineno)
        raise ConfigError(msg)
