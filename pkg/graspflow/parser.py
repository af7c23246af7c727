from sly import Parser
from collections import deque, namedtuple

from graspflow.lexer import ConfigLexer
from graspflow.error import ConfigError

Section = namedtuple('Section', ['name', 'lineno'])
Assignment = namedtuple('Assignment', ['key', 'value', 'lineno'])


class ConfigParser(Parser):
    '''
        Parses the run configuration language into a flat list of
        section headers and assignments, in source order.
    '''

    tokens = ConfigLexer.tokens

    def get_lineno(self, p):
        try:
            return p.lineno
        except AttributeError:
            return -1

    @_('statement_list')
    def document(self, p):
        return p.statement_list

    @_('statement_list statement')
    def statement_list(self, p):
        p.statement_list.append(p.statement)
        return p.statement_list

    @_('')
    def statement_list(self, p):
        return deque([])

    @_('LSQUARE NAME RSQUARE')
    def statement(self, p):
        return Section(name=p.NAME, lineno=self.get_lineno(p))

    @_('NAME EQUAL value')
    def statement(self, p):
        return Assignment(key=p.NAME, value=p.value, lineno=self.get_lineno(p))

    @_('NUMBER', 'STRING', 'NAME')
    def value(self, p):
        return p[0]

    @_('TRUE')
    def value(self, p):
        return True

    @_('FALSE')
    def value(self, p):
        return False

    @_('LSQUARE value comma_value_list RSQUARE')
    def value(self, p):
        p.comma_value_list.appendleft(p.value)
        return list(p.comma_value_list)

    @_('LSQUARE RSQUARE')
    def value(self, p):
        return []

    @_('')
    def comma_value_list(self, p):
        return deque([])

    @_('comma_value_list COMMA value')
    def comma_value_list(self, p):
        p.comma_value_list.append(p.value)
        return p.comma_value_list

    def error(self, p):
        if p is None:
            raise ConfigError('Unexpected end of configuration')
        msg = 'Illegal rule {} at line {}'.format(str(p.value), self.get_lineno(p))
        raise ConfigError(msg)


def parse_config(text):
    '''
        Parse configuration text.

        Returns:
            dict section name -> dict key -> (value, lineno); keys before
            the first header belong to the '' section
    '''
    statements = ConfigParser().parse(ConfigLexer().tokenize(text))
    sections = {'': {}}
    current = ''
    for statement in statements or []:
        if isinstance(statement, Section):
            if statement.name in sections and statement.name != '':
                msg = 'Duplicate section {} at line {}'.format(statement.name, statement.lineno)
                raise ConfigError(msg)
            current = statement.name
            sections[current] = {}
        else:
            if statement.key in sections[current]:
                msg = 'Duplicate name {} at line {}'.format(statement.key, statement.lineno)
                raise ConfigError(msg)
            sections[current][statement.key] = (statement.value, statement.lineno)
    return sections
