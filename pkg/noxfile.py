import nox


@nox.session
def tests(session):
    session.install("pytest", "coverage")
    session.install(".")
    session.run("coverage", "run", "-m", "pytest", *session.posargs)
    session.run("coverage", "report", "--include=*kinedecode*")
